//! Single-file binary checkpoints.
//!
//! Layout, all integers little-endian:
//! magic (8 bytes) | version u32 | header length u64 | model spec as TOML text |
//! tensor count u64 | per tensor: rank u64, dims u64 x rank, data f64 x numel.
//! Tensors appear in [`Model::tensors`] order.

use std::io::{Read, Write};
use std::path::Path;

use super::{Model, ModelSpec};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SNKHCKPT";
const VERSION: u32 = 1;

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let header = model.spec.to_text()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    let tensors = model.tensors();
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("length does not fit in memory"))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let header_len = r.len()?;
    let header = std::str::from_utf8(r.take(header_len)?).map_err(|_| corrupt("header is not UTF-8"))?;
    let spec = ModelSpec::from_text(header)?;
    let mut model = Model::new(spec, 0)?;
    let count = r.len()?;
    let mut slots = model.tensors_mut();
    if count != slots.len() {
        return Err(corrupt(format!("expected {} tensors, found {count}", slots.len())));
    }
    for (i, slot) in slots.iter_mut().enumerate() {
        let rank = r.len()?;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        if shape != slot.shape() {
            return Err(corrupt(format!(
                "tensor {i} has shape {shape:?}, the spec implies {:?}",
                slot.shape()
            )));
        }
        for x in slot.data_mut() {
            *x = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        }
    }
    if r.pos != buf.len() {
        return Err(corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    drop(slots);
    Ok(model)
}
