//! Base model checkpoint format. Adapters never live here; they have their
//! own files and attach at load time.
//!
//! Layout (little-endian):
//!
//! ```text
//! "ALAB"  magic
//! u32     version (currently 1)
//! u32 x5  vocab_size, dim, n_layers, n_heads, context_len
//! u64     init seed
//! u32     tensor count
//! tensor* name, u32 rows, u32 cols, f64 data (row-major)
//! ```
//!
//! Tensors are written in a fixed order, so saving the same model twice
//! yields identical bytes. Loading requires every expected tensor exactly
//! once with the shape the config implies.

use super::{ModelConfig, ModelError, Result, TinyLm};
use crate::binio::{Reader, Writer};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

const MAGIC: &[u8; 4] = b"ALAB";
const VERSION: u32 = 1;

fn io_err(path: &Path, source: crate::binio::BinError) -> ModelError {
    ModelError::CheckpointIo { path: path.display().to_string(), source }
}

fn format_err(path: &Path, what: impl Into<String>) -> ModelError {
    ModelError::CheckpointFormat { path: path.display().to_string(), what: what.into() }
}

pub(super) fn save(model: &TinyLm, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e.into()))?;
    let mut w = Writer::new(BufWriter::new(file));
    let cfg = model.config();
    let named = model.named_tensors();
    let put = |w: &mut Writer<BufWriter<File>>| -> std::result::Result<(), crate::binio::BinError> {
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        w.u32(cfg.vocab_size as u32)?;
        w.u32(cfg.dim as u32)?;
        w.u32(cfg.n_layers as u32)?;
        w.u32(cfg.n_heads as u32)?;
        w.u32(cfg.context_len as u32)?;
        w.u64(cfg.seed)?;
        w.u32(named.len() as u32)?;
        for (name, tensor) in &named {
            w.string(name)?;
            w.u32(tensor.rows() as u32)?;
            w.u32(tensor.cols() as u32)?;
            tensor.with_data(|d| w.f64_block(d))?;
        }
        Ok(())
    };
    put(&mut w).map_err(|e| io_err(path, e))?;
    w.finish().map_err(|e| io_err(path, e))?;
    Ok(())
}

pub(super) fn load(path: &Path) -> Result<TinyLm> {
    let file = File::open(path).map_err(|e| io_err(path, e.into()))?;
    let mut r = Reader::new(BufReader::new(file));

    let magic = r.bytes(4).map_err(|e| io_err(path, e))?;
    if magic != MAGIC {
        return Err(format_err(path, "bad magic, not a model checkpoint"));
    }
    let version = r.u32().map_err(|e| io_err(path, e))?;
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let next_u32 = |r: &mut Reader<BufReader<File>>| r.u32().map(|v| v as usize);
    let vocab_size = next_u32(&mut r).map_err(|e| io_err(path, e))?;
    let dim = next_u32(&mut r).map_err(|e| io_err(path, e))?;
    let n_layers = next_u32(&mut r).map_err(|e| io_err(path, e))?;
    let n_heads = next_u32(&mut r).map_err(|e| io_err(path, e))?;
    let context_len = next_u32(&mut r).map_err(|e| io_err(path, e))?;
    let seed = r.u64().map_err(|e| io_err(path, e))?;
    let config = ModelConfig { vocab_size, dim, n_layers, n_heads, context_len, seed };
    config.validate().map_err(|e| format_err(path, e.to_string()))?;

    // Fresh model gives us the expected tensor inventory; every blob in the
    // file then overwrites the matching init.
    let mut model = TinyLm::new(config)?;
    let count = r.u32().map_err(|e| io_err(path, e))?;
    let mut pending: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    {
        let expected: BTreeMap<String, (usize, usize)> = model
            .named_tensors()
            .into_iter()
            .map(|(name, t)| (name, (t.rows(), t.cols())))
            .collect();
        if count as usize != expected.len() {
            return Err(format_err(
                path,
                format!("expected {} tensors, file declares {count}", expected.len()),
            ));
        }
        for _ in 0..count {
            let at = r.offset();
            let name = r.string(4096).map_err(|e| io_err(path, e))?;
            let Some(&(rows, cols)) = expected.get(&name) else {
                return Err(format_err(path, format!("unexpected tensor '{name}' at byte {at}")));
            };
            let got_rows = r.u32().map_err(|e| io_err(path, e))? as usize;
            let got_cols = r.u32().map_err(|e| io_err(path, e))? as usize;
            if (got_rows, got_cols) != (rows, cols) {
                return Err(format_err(
                    path,
                    format!("tensor '{name}' is {got_rows}x{got_cols}, config implies {rows}x{cols}"),
                ));
            }
            let data = r.f64_block(rows * cols).map_err(|e| io_err(path, e))?;
            if pending.insert(name.clone(), data).is_some() {
                return Err(format_err(path, format!("duplicate tensor '{name}'")));
            }
        }
        if pending.len() != expected.len() {
            let missing: Vec<&String> =
                expected.keys().filter(|k| !pending.contains_key(*k)).collect();
            return Err(format_err(path, format!("missing tensors: {missing:?}")));
        }
    }
    for (name, tensor) in model.named_tensors_mut() {
        let data = pending.remove(&name).expect("coverage checked above");
        tensor.update_data(|d| d.copy_from_slice(&data));
    }
    Ok(model)
}
