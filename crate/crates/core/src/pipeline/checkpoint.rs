//! Versioned binary container of named `f64` arrays.
//!
//! Layout, all integers little-endian:
//! magic `FGDCKPT\0`, `u32` version, `u32` entry count, then per entry
//! `u32` name length, UTF-8 name, `u32` rank, `u64` per dimension and
//! the values as `f64`.

use std::path::Path;

use crate::error::{FgdError, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FGDCKPT\0";
pub const VERSION: u32 = 1;

pub fn encode<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| FgdError::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(FgdError::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(FgdError::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| FgdError::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel
            .filter(|&n| n <= (buf.len() - r.pos) / 8)
            .ok_or_else(|| FgdError::Format(format!("parameter {name} is larger than the file")))?;
        let bytes = r.take(numel * 8)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| FgdError::Format(format!("parameter {name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(FgdError::Format("trailing bytes after the last parameter".into()));
    }
    Ok(out)
}

pub fn save<'a>(path: &Path, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    write_atomic(path, &encode(entries))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&std::fs::read(path)?)
}
