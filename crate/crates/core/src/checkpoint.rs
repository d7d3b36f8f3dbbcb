//! Binary weight checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "PETLCKPT"
//! version u32      1
//! count   u32      number of entries
//! entry*  count times:
//!   path_len u32, path UTF-8 bytes
//!   frozen   u8 (0 or 1)
//!   ndim     u32, dims u64 * ndim
//!   data     f64 * prod(dims)
//! ```
//!
//! Entries appear in registry order. Values are stored as raw IEEE-754 bits,
//! so a load restores tensors bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::registry::ParameterRegistry;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PETLCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub path: String,
    pub frozen: bool,
    pub tensor: Tensor,
}

pub fn write_checkpoint<W: Write>(registry: &ParameterRegistry, mut out: W) -> Result<()> {
    let io = |e| Error::io("<checkpoint>", e);
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    out.write_all(&(registry.len() as u32).to_le_bytes()).map_err(io)?;
    for p in registry.iter() {
        let path = p.path().as_bytes();
        out.write_all(&(path.len() as u32).to_le_bytes()).map_err(io)?;
        out.write_all(path).map_err(io)?;
        out.write_all(&[u8::from(p.frozen())]).map_err(io)?;
        out.write_all(&(p.shape().len() as u32).to_le_bytes()).map_err(io)?;
        for &d in p.shape() {
            out.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        let mut buf = Vec::with_capacity(p.tensor().len() * 8);
        for v in p.tensor().data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf).map_err(io)?;
    }
    out.flush().map_err(io)
}

fn take<const N: usize>(input: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input
        .read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("unexpected end of checkpoint".into()))?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Vec<CheckpointEntry>> {
    if &take::<8>(&mut input)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut input)?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut input)?) as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u32::from_le_bytes(take(&mut input)?) as usize;
        let mut path = vec![0u8; len];
        input
            .read_exact(&mut path)
            .map_err(|_| Error::Checkpoint("truncated path".into()))?;
        let path = String::from_utf8(path).map_err(|_| Error::Checkpoint("path is not UTF-8".into()))?;
        let frozen = match take::<1>(&mut input)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Checkpoint(format!("bad frozen flag {b} for {path}"))),
        };
        let ndim = u32::from_le_bytes(take(&mut input)?) as usize;
        let shape = (0..ndim)
            .map(|_| Ok(u64::from_le_bytes(take(&mut input)?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        input
            .read_exact(&mut raw)
            .map_err(|_| Error::Checkpoint(format!("truncated data for {path}")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{path}: {e}")))?;
        entries.push(CheckpointEntry { path, frozen, tensor });
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest).map_err(|e| Error::io("<checkpoint>", e))? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last entry".into()));
    }
    Ok(entries)
}

pub fn save(registry: &ParameterRegistry, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(registry, std::io::BufWriter::new(file))
}

pub fn load(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}

/// Overwrites the values and frozen flags of `registry` from a checkpoint
/// holding exactly the same paths and shapes.
pub fn restore(registry: &mut ParameterRegistry, entries: &[CheckpointEntry]) -> Result<()> {
    if entries.len() != registry.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} entries, model has {}",
            entries.len(),
            registry.len()
        )));
    }
    for e in entries {
        let p = registry
            .by_path(&e.path)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", e.path)))?;
        if p.shape() != e.tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "{}: shape {:?} in checkpoint, {:?} in model",
                e.path,
                e.tensor.shape(),
                p.shape()
            )));
        }
    }
    for e in entries {
        let p = registry.by_path_mut(&e.path).expect("checked above");
        p.tensor_mut().data_mut().copy_from_slice(e.tensor.data());
        p.set_frozen(e.frozen);
    }
    Ok(())
}
