//! Binary weight files, little-endian throughout:
//!
//! ```text
//! "ICVP" | u32 version = 1 | u32 count
//! count × ( u16 name_len | name (UTF-8) | u8 ndim | u32 dims[ndim] | f32 data[prod(dims)] )
//! ```
//!
//! Every stored tensor is written, including batch-norm running statistics.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;

const MAGIC: &[u8; 4] = b"ICVP";
const VERSION: u32 = 1;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(format!("weights: {}", msg.into()))
}

pub fn encode_weights(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| format_err(format!("name `{}` is too long", p.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.tensor.shape();
        out.push(u8::try_from(shape.len()).map_err(|_| format_err("too many dimensions"))?);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(format_err("truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// A decoded tensor record.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn decode_weights(bytes: &[u8]) -> Result<Vec<WeightRecord>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(format_err("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| format_err("name is not UTF-8"))?.to_string();
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| format_err("tensor too large"))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        records.push(WeightRecord { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(format_err("trailing bytes after the last tensor"));
    }
    Ok(records)
}

/// Copies decoded tensors into `store`. Every stored tensor must be present
/// with the same shape, and the file may not contain unknown names.
pub fn load_into(store: &mut ParamStore, records: Vec<WeightRecord>) -> Result<()> {
    let mut by_name: HashMap<String, WeightRecord> = HashMap::new();
    for rec in records {
        if by_name.contains_key(&rec.name) {
            return Err(format_err(format!("duplicate tensor `{}`", rec.name)));
        }
        by_name.insert(rec.name.clone(), rec);
    }
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let rec = by_name.remove(&name).ok_or_else(|| format_err(format!("missing tensor `{name}`")))?;
        let want = store.get(id).shape();
        if rec.shape != want {
            return Err(Error::Shape(format!("tensor `{name}`: file has {:?}, model expects {want:?}", rec.shape)));
        }
        store.get_mut(id).data_mut().copy_from_slice(&rec.data);
    }
    if let Some(name) = by_name.keys().min() {
        return Err(format_err(format!("unknown tensor `{name}`")));
    }
    Ok(())
}

pub fn save_weights(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    Ok(std::fs::write(path, encode_weights(store)?)?)
}

pub fn load_weights(store: &mut ParamStore, path: impl AsRef<Path>) -> Result<()> {
    load_into(store, decode_weights(&std::fs::read(path)?)?)
}
