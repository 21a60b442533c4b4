//! Binary container of named, shaped arrays.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes   "MINETBIN"
//! version  u32       1
//! hash     u64       configuration hash, 0 when not applicable
//! count    u32       number of entries
//! entry × count:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   dtype    u8      1 = f32, 2 = f64, 3 = u8, 4 = i64
//!   ndim     u32
//!   dims     u64 × ndim
//!   data     product(dims) elements, row-major
//! ```
//!
//! Checkpoints store every parameter of a [`ParamStore`] as f64 under its
//! dotted name, with the hash of the model configuration that built it.

use std::io::{Read, Write};
use std::path::Path;

use crate::data::io::write_atomic;
use crate::error::{Error, Result};
use crate::nn::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"MINETBIN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    I64(Vec<i64>),
}

impl EntryData {
    fn dtype(&self) -> u8 {
        match self {
            EntryData::F32(_) => 1,
            EntryData::F64(_) => 2,
            EntryData::U8(_) => 3,
            EntryData::I64(_) => 4,
        }
    }

    fn len(&self) -> usize {
        match self {
            EntryData::F32(v) => v.len(),
            EntryData::F64(v) => v.len(),
            EntryData::U8(v) => v.len(),
            EntryData::I64(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: EntryData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub hash: u64,
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn new(hash: u64) -> Self {
        Self {
            hash,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, dims: &[usize], data: EntryData) -> Result<()> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "entry dims {dims:?} need {n} elements, got {}",
                data.len()
            )));
        }
        self.entries.push(Entry {
            name: name.into(),
            dims: dims.to_vec(),
            data,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.hash.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.data.dtype());
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.data {
                EntryData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                EntryData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                EntryData::U8(v) => out.extend_from_slice(v),
                EntryData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a MINETBIN container (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let hash = u64::from_le_bytes(take(&mut r)?);
        let count = u32::from_le_bytes(take(&mut r)?) as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut r)?) as usize;
            if name_len > r.len() {
                return Err(Error::Format("truncated entry name".into()));
            }
            let (name, rest) = r.split_at(name_len);
            let name = String::from_utf8(name.to_vec())
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            r = rest;
            let [dtype] = take::<1>(&mut r)?;
            let ndim = u32::from_le_bytes(take(&mut r)?) as usize;
            let mut dims = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                dims.push(u64::from_le_bytes(take(&mut r)?) as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("entry {name}: dims overflow")))?;
            let width = match dtype {
                1 => 4,
                2 | 4 => 8,
                3 => 1,
                d => return Err(Error::Format(format!("entry {name}: unknown dtype {d}"))),
            };
            if n.checked_mul(width).is_none_or(|b| b > r.len()) {
                return Err(Error::Format(format!("entry {name}: truncated data")));
            }
            let (raw, rest) = r.split_at(n * width);
            r = rest;
            let data = match dtype {
                1 => EntryData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                2 => EntryData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                3 => EntryData::U8(raw.to_vec()),
                _ => EntryData::I64(
                    raw.chunks_exact(8)
                        .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            entries.push(Entry { name, dims, data });
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { hash, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    if r.len() < buf.len() {
        return Err(Error::Format("truncated container".into()));
    }
    let (head, rest) = r.split_at(buf.len());
    buf.copy_from_slice(head);
    *r = rest;
    Ok(())
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

/// Every parameter (trainable and running statistics) as f64 entries.
pub fn checkpoint_from_store(store: &ParamStore, config_hash: u64) -> Container {
    let mut c = Container::new(config_hash);
    for (_, p) in store.iter() {
        c.entries.push(Entry {
            name: p.name.clone(),
            dims: p.value.shape().to_vec(),
            data: EntryData::F64(p.value.data().to_vec()),
        });
    }
    c
}

/// Overwrites `store` with the checkpoint's values. The configuration hash and
/// the name/shape of every parameter must match.
pub fn restore_store(store: &mut ParamStore, ckpt: &Container, config_hash: u64) -> Result<()> {
    if ckpt.hash != config_hash {
        return Err(Error::Data(format!(
            "checkpoint was built for configuration {:016x}, current configuration is {:016x}",
            ckpt.hash, config_hash
        )));
    }
    if ckpt.entries.len() != store.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} tensors, model has {}",
            ckpt.entries.len(),
            store.len()
        )));
    }
    for p in store.iter_mut() {
        let e = ckpt
            .get(&p.name)
            .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor {}", p.name)))?;
        let EntryData::F64(values) = &e.data else {
            return Err(Error::Format(format!("tensor {} is not f64", p.name)));
        };
        if e.dims != p.value.shape() {
            return Err(Error::Data(format!(
                "tensor {}: checkpoint shape {:?}, model shape {:?}",
                p.name,
                e.dims,
                p.value.shape()
            )));
        }
        p.value.data_mut().copy_from_slice(values);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_all_dtypes() {
        let mut c = Container::new(0xdead_beef);
        c.push("a", &[2, 2], EntryData::F32(vec![1.0, 2.0, 3.0, 4.5])).unwrap();
        c.push("b", &[3], EntryData::F64(vec![-1.0, 0.0, 1e300])).unwrap();
        c.push("m", &[1, 2], EntryData::U8(vec![0, 1])).unwrap();
        c.push("i", &[2], EntryData::I64(vec![-1, 7])).unwrap();
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_corruption() {
        let mut c = Container::new(1);
        c.push("a", &[2], EntryData::F64(vec![1.0, 2.0])).unwrap();
        let bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(Container::from_bytes(&extra).is_err());
    }
}
