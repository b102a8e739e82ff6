//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "FNSCKPT\0"
//! version    u32       FORMAT_VERSION
//! header     u32 len + UTF-8 bytes, one `key=value` per line
//! count      u32
//! entry*     u32 name len + name bytes, u32 ndim, ndim x u64 dims,
//!            numel x f32 values
//! ```
//!
//! Values are stored in single precision. Parameters trained with f32
//! storage rounding round-trip exactly.

use std::path::Path;

use super::tensor::{numel, ParamStore, Tensor};
use crate::artifact;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FNSCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Ordered `key=value` metadata carried alongside the parameters.
pub type Header = Vec<(String, String)>;

pub fn header_get<'a>(header: &'a Header, key: &str) -> Option<&'a str> {
    header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

pub fn to_bytes(header: &Header, params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let text: String = header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::BadCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::BadCheckpoint("non-UTF-8 text".into()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Header, ParamStore)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::BadCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::BadCheckpoint(format!("unsupported version {version}")));
    }
    let header = r
        .string()?
        .lines()
        .map(|line| {
            line.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::BadCheckpoint(format!("header line `{line}`")))
        })
        .collect::<Result<Header>>()?;
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = numel(&shape);
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::BadCheckpoint("overflow".into()))?)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if params.id(&name).is_some() {
            return Err(Error::BadCheckpoint(format!("duplicate entry `{name}`")));
        }
        params.add(name, Tensor::new(&shape, values)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::BadCheckpoint("trailing bytes".into()));
    }
    Ok((header, params))
}

pub fn save(path: &Path, header: &Header, params: &ParamStore) -> Result<()> {
    artifact::write_atomic(path, &to_bytes(header, params))
}

pub fn load(path: &Path) -> Result<(Header, ParamStore)> {
    from_bytes(&artifact::read(path)?)
}
