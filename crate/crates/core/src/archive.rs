//! Versioned tensor container.
//!
//! Layout: 8-byte magic, u32 format version, u64 manifest length, the JSON
//! manifest, then every tensor as little-endian f64 in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const MAGIC: &[u8; 8] = b"LATMARK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format_version: u32,
    pub tensors: Vec<TensorEntry>,
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new(meta: serde_json::Value) -> Self {
        Archive { meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn extend(&mut self, named: Vec<(String, Tensor)>) {
        self.tensors.extend(named);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Archive(format!("tensor {name} shape/data mismatch")));
            }
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: "f64".into(),
                shape: t.shape.clone(),
                offset,
                len: t.data.len(),
            });
            offset += t.data.len();
        }
        let manifest = Manifest { format_version: FORMAT_VERSION, tensors: entries, meta: self.meta.clone() };
        let mjson = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(20 + mjson.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(mjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&mjson);
        for (_, t) in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Archive("not a latmark archive".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Archive(format!("unsupported archive version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + mlen).ok_or_else(|| Error::Archive("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        let data = &bytes[20 + mlen..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            if e.dtype != "f64" {
                return Err(Error::Archive(format!("tensor {}: unsupported dtype {}", e.name, e.dtype)));
            }
            if e.shape.iter().product::<usize>() != e.len {
                return Err(Error::Archive(format!("tensor {}: shape does not match length", e.name)));
            }
            let raw = data
                .get(e.offset * 8..(e.offset + e.len) * 8)
                .ok_or_else(|| Error::Archive(format!("tensor {} is truncated", e.name)))?;
            let vals = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((e.name.clone(), Tensor { shape: e.shape.clone(), data: vals }));
        }
        Ok(Archive { meta: manifest.meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Archive::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let mut a = Archive::new(serde_json::json!({"epoch": 3}));
        a.push("w", Tensor { shape: vec![2, 2], data: vec![1.0, -2.5, f64::MIN_POSITIVE, 4.0] });
        a.push("b", Tensor { shape: vec![1], data: vec![0.125] });
        let back = Archive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(Archive::from_bytes(b"not an archive at all").is_err());
        let mut a = Archive::new(serde_json::json!({}));
        a.push("w", Tensor { shape: vec![3], data: vec![1.0, 2.0, 3.0] });
        let bytes = a.to_bytes().unwrap();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    }
}
