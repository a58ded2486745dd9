//! Flat checkpoint files of named `f64` arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "PDTCKPT\0"
//! version  u32
//! checksum 32 bytes SHA-256 of everything after this field
//! meta_len u32, meta bytes (UTF-8, free-form; the model stores its config as JSON)
//! count    u32
//! count × { name_len u32, name, ndim u32, dims u64 × ndim, values f64 × prod(dims) }
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::array::DenseArray;
use super::graph::ParamStore;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PDTCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(params: &ParamStore, meta: &str) -> Vec<u8> {
    let mut body = Vec::new();
    body.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    body.extend_from_slice(meta.as_bytes());
    body.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, array) in params.iter() {
        body.extend_from_slice(&(name.len() as u32).to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.extend_from_slice(&(array.shape().len() as u32).to_le_bytes());
        for &d in array.shape() {
            body.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in array.values() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(body.len() + 44);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&body));
    out.extend_from_slice(&body);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore, String)> {
    if bytes.len() < 44 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let body = &bytes[44..];
    if Sha256::digest(body).as_slice() != &bytes[12..44] {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    let meta_len = r.u32()? as usize;
    let meta = String::from_utf8(r.take(meta_len)?.to_vec())
        .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, DenseArray::new(shape, values)?);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((params, meta))
}

/// Writes atomically through a temporary sibling file.
pub fn save(params: &ParamStore, meta: &str, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &encode(params, meta))
}

pub fn load(path: &Path) -> Result<(ParamStore, String)> {
    decode(&fs::read(path)?)
}
