//! Little-endian binary reader/writer helpers shared by the checkpoint and
//! adapter file formats. The reader tracks its byte offset so format errors
//! can say where the file went wrong.

use std::io::{self, Read, Write};

#[derive(Debug, thiserror::Error)]
pub enum BinError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("format error at byte {offset}: {what}")]
    Format { offset: u64, what: String },
}

pub struct Reader<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    pub fn new(inner: R) -> Self {
        Reader { inner, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<(), BinError> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                BinError::Format { offset: self.offset, what: "unexpected end of file".into() }
            } else {
                BinError::Io(e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub fn bytes(&mut self, n: usize) -> Result<Vec<u8>, BinError> {
        let mut buf = vec![0u8; n];
        self.fill(&mut buf)?;
        Ok(buf)
    }

    pub fn u8(&mut self) -> Result<u8, BinError> {
        let mut buf = [0u8; 1];
        self.fill(&mut buf)?;
        Ok(buf[0])
    }

    pub fn u32(&mut self) -> Result<u32, BinError> {
        let mut buf = [0u8; 4];
        self.fill(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    pub fn u64(&mut self) -> Result<u64, BinError> {
        let mut buf = [0u8; 8];
        self.fill(&mut buf)?;
        Ok(u64::from_le_bytes(buf))
    }

    pub fn f64(&mut self) -> Result<f64, BinError> {
        let mut buf = [0u8; 8];
        self.fill(&mut buf)?;
        Ok(f64::from_le_bytes(buf))
    }

    /// Length-prefixed UTF-8 string; `max` bounds the declared length so a
    /// corrupt prefix cannot trigger a huge allocation.
    pub fn string(&mut self, max: u32) -> Result<String, BinError> {
        let start = self.offset;
        let len = self.u32()?;
        if len > max {
            return Err(BinError::Format {
                offset: start,
                what: format!("string length {len} exceeds limit {max}"),
            });
        }
        let raw = self.bytes(len as usize)?;
        String::from_utf8(raw)
            .map_err(|_| BinError::Format { offset: start, what: "invalid utf-8".into() })
    }

    /// `count` little-endian f64 values, validated finite.
    pub fn f64_block(&mut self, count: usize) -> Result<Vec<f64>, BinError> {
        let start = self.offset;
        let raw = self.bytes(count * 8)?;
        let mut out = Vec::with_capacity(count);
        for chunk in raw.chunks_exact(8) {
            let v = f64::from_le_bytes(chunk.try_into().expect("chunk is 8 bytes"));
            if !v.is_finite() {
                return Err(BinError::Format {
                    offset: start + out.len() as u64 * 8,
                    what: "non-finite value in data block".into(),
                });
            }
            out.push(v);
        }
        Ok(out)
    }
}

pub struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub fn new(inner: W) -> Self {
        Writer { inner }
    }

    pub fn bytes(&mut self, data: &[u8]) -> Result<(), BinError> {
        self.inner.write_all(data)?;
        Ok(())
    }

    pub fn u8(&mut self, v: u8) -> Result<(), BinError> {
        self.bytes(&[v])
    }

    pub fn u32(&mut self, v: u32) -> Result<(), BinError> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> Result<(), BinError> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> Result<(), BinError> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn string(&mut self, s: &str) -> Result<(), BinError> {
        self.u32(s.len() as u32)?;
        self.bytes(s.as_bytes())
    }

    pub fn f64_block(&mut self, data: &[f64]) -> Result<(), BinError> {
        for &v in data {
            self.f64(v)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), BinError> {
        self.inner.flush()?;
        Ok(())
    }
}
