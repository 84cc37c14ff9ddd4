//! Versioned binary checkpoint format.
//!
//! Layout: magic bytes `LEAR`, format version (u32 little-endian), then one
//! block per named parameter in store order: name length (u64 LE), UTF-8
//! name, rank (u64 LE), each dimension (u64 LE), then the f64 values in
//! row-major order, little-endian. Blocks run to end of file.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LEAR";
pub const FORMAT_VERSION: u32 = 1;

pub fn to_bytes(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.total_values() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (name, tensor) in params.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u64).to_le_bytes());
        for &dim in tensor.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(params: &ParamSet, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(params))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes (not a checkpoint)".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let mut out = Vec::new();
    while !r.done() {
        let name_len = r.u64()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = r.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    from_bytes(&std::fs::read(path)?)
}

/// Loads a checkpoint into an existing parameter skeleton; every name and
/// shape must match exactly.
pub fn load_into(params: &mut ParamSet, path: &Path) -> Result<()> {
    let loaded = load(path)?;
    if loaded.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: checkpoint has {}, model expects {}",
            loaded.len(),
            params.len()
        )));
    }
    for (name, tensor) in loaded {
        let Some(existing) = params.try_get(&name) else {
            return Err(Error::Checkpoint(format!(
                "unexpected parameter '{name}' in checkpoint"
            )));
        };
        if existing.shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for '{name}': checkpoint {:?}, model {:?}",
                tensor.shape(),
                existing.shape()
            )));
        }
        params
            .get_mut(&name)
            .data_mut()
            .copy_from_slice(tensor.data());
    }
    Ok(())
}
