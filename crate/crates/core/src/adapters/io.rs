//! Adapter file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ALAD"  magic
//! u32     version (currently 1)
//! u8      kind: 0 = low-rank, 1 = hierarchical, 2 = dense delta
//! u32     entry count
//! entry*  name, n, m, r1, r2, alpha1, alpha2, frozen flag, factor blobs
//! ```
//!
//! Factor blobs per kind: low-rank stores `A (r1 x m)` then `B (n x r1)`;
//! hierarchical appends `A1 (r2 x m)`, `A2 (r1 x r2)`, `B1 (r2 x r1)`,
//! `B2 (n x r2)`; dense delta stores one `n x m` block. Entries are written
//! in attachment-name order, so saving the same set twice yields identical
//! bytes. A stacked adapter is not a file kind: each stage saves to its own
//! file and stacking happens at attach time.

use super::{AdapterError, AdapterSet, AdapterSpec, DeltaMatrix, HloraBlock, LoraBlock, Result};
use crate::binio::{Reader, Writer};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

const MAGIC: &[u8; 4] = b"ALAD";
const VERSION: u32 = 1;
const KIND_LORA: u8 = 0;
const KIND_HLORA: u8 = 1;
const KIND_DELTA: u8 = 2;
/// Caps dimension fields so a corrupt header cannot demand huge allocations.
const MAX_DIM: u32 = 1 << 20;

fn file_err(path: &Path, source: crate::binio::BinError) -> AdapterError {
    AdapterError::File { path: path.display().to_string(), source }
}

fn malformed(path: &Path, what: impl Into<String>) -> AdapterError {
    AdapterError::Malformed { path: path.display().to_string(), what: what.into() }
}

fn spec_kind(spec: &AdapterSpec) -> Result<u8> {
    match spec {
        AdapterSpec::Lora(_) => Ok(KIND_LORA),
        AdapterSpec::Hlora(_) => Ok(KIND_HLORA),
        AdapterSpec::Delta(_) => Ok(KIND_DELTA),
        AdapterSpec::Stack(_) => Err(AdapterError::StackNotSerializable),
    }
}

pub fn save_adapter_set(path: &Path, set: &AdapterSet) -> Result<()> {
    let mut kinds = set.values().map(spec_kind);
    let kind = match kinds.next() {
        Some(k) => k?,
        None => return Err(malformed(path, "refusing to save an empty adapter set")),
    };
    for k in kinds {
        if k? != kind {
            return Err(malformed(path, "adapter set mixes kinds; save them separately"));
        }
    }

    let file = File::create(path).map_err(|e| file_err(path, e.into()))?;
    let mut w = Writer::new(BufWriter::new(file));
    let put = |w: &mut Writer<BufWriter<File>>| -> std::result::Result<(), crate::binio::BinError> {
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        w.u8(kind)?;
        w.u32(set.len() as u32)?;
        for (name, spec) in set {
            w.string(name)?;
            match spec {
                AdapterSpec::Lora(b) => {
                    w.u32(b.out_dim() as u32)?;
                    w.u32(b.in_dim() as u32)?;
                    w.u32(b.rank as u32)?;
                    w.u32(0)?;
                    w.f64(b.alpha)?;
                    w.f64(0.0)?;
                    w.u8(b.frozen() as u8)?;
                    b.a.with_data(|d| w.f64_block(d))?;
                    b.b.with_data(|d| w.f64_block(d))?;
                }
                AdapterSpec::Hlora(h) => {
                    w.u32(h.base.out_dim() as u32)?;
                    w.u32(h.base.in_dim() as u32)?;
                    w.u32(h.base.rank as u32)?;
                    w.u32(h.rank2 as u32)?;
                    w.f64(h.base.alpha)?;
                    w.f64(h.alpha2)?;
                    w.u8(h.base.frozen() as u8)?;
                    h.base.a.with_data(|d| w.f64_block(d))?;
                    h.base.b.with_data(|d| w.f64_block(d))?;
                    h.a1.with_data(|d| w.f64_block(d))?;
                    h.a2.with_data(|d| w.f64_block(d))?;
                    h.b1.with_data(|d| w.f64_block(d))?;
                    h.b2.with_data(|d| w.f64_block(d))?;
                }
                AdapterSpec::Delta(dm) => {
                    w.u32(dm.delta.rows() as u32)?;
                    w.u32(dm.delta.cols() as u32)?;
                    w.u32(0)?;
                    w.u32(0)?;
                    w.f64(0.0)?;
                    w.f64(0.0)?;
                    w.u8(0)?;
                    dm.delta.with_data(|d| w.f64_block(d))?;
                }
                AdapterSpec::Stack(_) => unreachable!("kind check rejects stacks"),
            }
        }
        Ok(())
    };
    put(&mut w).map_err(|e| file_err(path, e))?;
    w.finish().map_err(|e| file_err(path, e))?;
    Ok(())
}

pub fn load_adapter_set(path: &Path) -> Result<AdapterSet> {
    let file = File::open(path).map_err(|e| file_err(path, e.into()))?;
    let mut r = Reader::new(BufReader::new(file));

    let magic = r.bytes(4).map_err(|e| file_err(path, e))?;
    if magic != MAGIC {
        return Err(malformed(path, "bad magic, not an adapter file"));
    }
    let version = r.u32().map_err(|e| file_err(path, e))?;
    if version != VERSION {
        return Err(malformed(path, format!("unsupported version {version}")));
    }
    let kind = r.u8().map_err(|e| file_err(path, e))?;
    if kind > KIND_DELTA {
        return Err(malformed(path, format!("unknown adapter kind {kind}")));
    }
    let count = r.u32().map_err(|e| file_err(path, e))?;

    let mut set = AdapterSet::new();
    for _ in 0..count {
        let entry_start = r.offset();
        let name = r.string(4096).map_err(|e| file_err(path, e))?;
        if name.is_empty() {
            return Err(malformed(path, format!("empty attachment name at byte {entry_start}")));
        }
        let dims: Vec<u32> = (0..4)
            .map(|_| r.u32())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| file_err(path, e))?;
        let [n, m, r1, r2] = dims[..] else { unreachable!() };
        for d in [n, m] {
            if d == 0 || d > MAX_DIM {
                return Err(malformed(path, format!("entry '{name}': dimension {d} out of range")));
            }
        }
        if r1 > MAX_DIM || r2 > MAX_DIM {
            return Err(malformed(path, format!("entry '{name}': rank out of range")));
        }
        let alpha1 = r.f64().map_err(|e| file_err(path, e))?;
        let alpha2 = r.f64().map_err(|e| file_err(path, e))?;
        let frozen = r.u8().map_err(|e| file_err(path, e))? != 0;
        let (n, m, r1, r2) = (n as usize, m as usize, r1 as usize, r2 as usize);

        let mut block = |rows: usize, cols: usize| -> Result<Tensor> {
            let data = r.f64_block(rows * cols).map_err(|e| file_err(path, e))?;
            Tensor::from_vec(rows, cols, data).map_err(AdapterError::Tensor)
        };

        let spec = match kind {
            KIND_LORA => {
                if r1 == 0 || r2 != 0 {
                    return Err(malformed(path, format!("entry '{name}': bad low-rank header")));
                }
                let a = block(r1, m)?;
                let b = block(n, r1)?;
                AdapterSpec::Lora(LoraBlock::from_parts(a, b, alpha1, frozen)?)
            }
            KIND_HLORA => {
                if r1 == 0 || r2 == 0 {
                    return Err(malformed(path, format!("entry '{name}': bad hierarchical header")));
                }
                let a = block(r1, m)?;
                let b = block(n, r1)?;
                let a1 = block(r2, m)?;
                let a2 = block(r1, r2)?;
                let b1 = block(r2, r1)?;
                let b2 = block(n, r2)?;
                let base = LoraBlock::from_parts(a, b, alpha1, frozen)?;
                AdapterSpec::Hlora(HloraBlock::from_parts(base, a1, a2, b1, b2, alpha2)?)
            }
            KIND_DELTA => {
                if r1 != 0 || r2 != 0 {
                    return Err(malformed(path, format!("entry '{name}': bad delta header")));
                }
                AdapterSpec::Delta(DeltaMatrix { delta: block(n, m)? })
            }
            _ => unreachable!("kind validated above"),
        };
        if set.insert(name.clone(), spec).is_some() {
            return Err(malformed(path, format!("duplicate attachment name '{name}'")));
        }
    }
    Ok(set)
}
