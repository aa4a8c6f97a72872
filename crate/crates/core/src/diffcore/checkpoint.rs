//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "SQNETCKP"
//! version   u32
//! hdr_len   u32
//! header    hdr_len bytes of UTF-8 JSON (hyperparameters, training state)
//! count     u32
//! count × { name_len u32, name bytes, ndim u32, ndim × u64 dims, values f32 × prod(dims) }
//! ```
//!
//! Entry names are prefixed by kind: `param/`, `buffer/`, `adam.m/`, `adam.v/`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::adam::{Adam, AdamConfig};
use super::tensor::{ParamSet, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SQNETCKP";
pub const VERSION: u32 = 1;

const PARAM: &str = "param/";
const BUFFER: &str = "buffer/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub arrays: BTreeMap<String, Array>,
}

fn to_array<T: Real>(shape: &[usize], values: &[T]) -> Array {
    Array {
        shape: shape.to_vec(),
        values: values.iter().map(|v| v.as_f64() as f32).collect(),
    }
}

impl Checkpoint {
    pub fn new(header: serde_json::Value) -> Self {
        Self {
            header,
            arrays: BTreeMap::new(),
        }
    }

    pub fn put_params<T: Real>(&mut self, params: &ParamSet<T>) {
        for (name, t) in params.iter() {
            self.arrays
                .insert(format!("{PARAM}{name}"), to_array(t.shape(), t.values()));
        }
        for (name, t) in params.buffers() {
            self.arrays
                .insert(format!("{BUFFER}{name}"), to_array(t.shape(), t.values()));
        }
    }

    pub fn params<T: Real>(&self) -> Result<ParamSet<T>> {
        let mut set = ParamSet::new();
        for (key, arr) in &self.arrays {
            let values: Vec<T> = arr.values.iter().map(|&v| T::of(v as f64)).collect();
            if let Some(name) = key.strip_prefix(PARAM) {
                set.insert(name, Tensor::new(arr.shape.clone(), values)?)?;
            } else if let Some(name) = key.strip_prefix(BUFFER) {
                set.insert_buffer(name, Tensor::new(arr.shape.clone(), values)?)?;
            }
        }
        Ok(set)
    }

    pub fn put_optimizer<T: Real>(&mut self, adam: &Adam<T>) {
        for (name, m, v) in adam.moments() {
            self.arrays
                .insert(format!("{ADAM_M}{name}"), to_array(&[m.len()], m));
            self.arrays
                .insert(format!("{ADAM_V}{name}"), to_array(&[v.len()], v));
        }
    }

    pub fn optimizer<T: Real>(&self, config: AdamConfig, step: u64) -> Adam<T> {
        let collect = |prefix: &str| {
            self.arrays
                .iter()
                .filter_map(|(k, a)| {
                    k.strip_prefix(prefix).map(|name| {
                        (
                            name.to_string(),
                            a.values.iter().map(|&v| T::of(v as f64)).collect(),
                        )
                    })
                })
                .collect()
        };
        Adam::restore(config, step, collect(ADAM_M), collect(ADAM_V))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, arr) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(arr.shape.len() as u32).to_le_bytes());
            for &d in &arr.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &arr.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let hdr_len = cur.u32()? as usize;
        let header = serde_json::from_slice(cur.take(hdr_len)?)?;
        let count = cur.u32()?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
                .to_string();
            let ndim = cur.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = cur.take(n * 4)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.insert(name, Array { shape, values });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { header, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}
