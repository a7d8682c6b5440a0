//! Binary checkpoint format.
//!
//! ```text
//! "MVCK" | u16 version=1 | u32 count |
//!   count x ( u16 name_len | name (utf-8) | u8 rank | rank x u32 dim | f32 data... )
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::{ParamStore, Result, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MVCK";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn encode_checkpoint(store: &ParamStore<f32>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in p.value.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> TensorError {
        TensorError::Checkpoint {
            path: self.path.to_string(),
            offset: self.pos,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(buf: &[u8], path: &str) -> Result<ParamStore<f32>> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic, expected MVCK"));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let count = r.u32("parameter count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| {
                let mut e = r.err("name is not utf-8");
                if let TensorError::Checkpoint { offset, .. } = &mut e {
                    *offset = name_at;
                }
                e
            })?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let at = r.pos;
        store.add(name, Tensor::new(shape, data)?).map_err(|e| TensorError::Checkpoint {
            path: path.to_string(),
            offset: at,
            detail: e.to_string(),
        })?;
    }
    if r.pos != buf.len() {
        return Err(r.err("trailing bytes after last parameter"));
    }
    Ok(store)
}

pub fn write_checkpoint(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    fs::write(path, encode_checkpoint(store)).map_err(|source| TensorError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<ParamStore<f32>> {
    let buf = fs::read(path).map_err(|source| TensorError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&buf, &path.display().to_string())
}
