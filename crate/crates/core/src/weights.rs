//! Named-tensor weight container.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "CASPWGT\0"
//! version  u32      1
//! count    u32
//! count × { name_len u32, name utf-8, ndim u32, dims u32 × ndim, data f32 × prod(dims) }
//! crc32    u32      over every preceding byte
//! ```
//!
//! Names follow `stage.block.branch.kind`, e.g. `low.s1.b0.dense.weight`
//! or `hybrid.b1.cross_attn.q.weight`. Entries are written in name order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CaspError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CASPWGT\0";
pub const VERSION: u32 = 1;

/// Kinds that hold statistics rather than learnable parameters.
const BUFFER_SUFFIXES: [&str; 2] = [".running_mean", ".running_var"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    entries: BTreeMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    /// Fetches a tensor and checks its shape.
    pub fn take(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self
            .entries
            .get(name)
            .ok_or_else(|| CaspError::Load(format!("missing tensor `{name}`")))?;
        if t.shape() != shape {
            return Err(CaspError::Load(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                shape
            )));
        }
        Ok(t.clone())
    }

    pub fn take_vec(&self, name: &str, len: usize) -> Result<Vec<f32>> {
        Ok(self.take(name, &[len])?.into_data())
    }

    pub fn take_scalar(&self, name: &str) -> Result<f32> {
        Ok(self.take(name, &[1])?.data()[0])
    }

    /// Learnable parameters under `prefix` (BN running statistics excluded).
    pub fn param_count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .filter(|(k, _)| !BUFFER_SUFFIXES.iter().any(|s| k.ends_with(s)))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn merge(&mut self, other: WeightStore) {
        self.entries.extend(other.entries);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let load = |m: &str| CaspError::Load(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(load("not a weight container (bad magic)"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(load("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CaspError::Load(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut store = WeightStore::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.bytes(nlen)?)
                .map_err(|_| load("tensor name is not utf-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.bytes(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if store.entries.contains_key(&name) {
                return Err(CaspError::Load(format!("duplicate tensor `{name}`")));
            }
            store.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != body.len() {
            return Err(load("trailing bytes after last tensor"));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CaspError::Load("truncated weight container".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
}

/// Gaussian initialiser shared by all weight structs.
pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f32) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

pub fn normal_vec(rng: &mut impl Rng, len: usize, std: f32) -> Vec<f32> {
    normal_tensor(rng, &[len], std).into_data()
}
