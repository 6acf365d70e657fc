//! Named-tensor checkpoints: a binary blob with per-tensor shape headers plus a
//! JSON index mapping each name to its data offset and shape.
//!
//! Blob layout (little endian): magic `GMCKPT01`, then per tensor a `u32` rank,
//! `rank` x `u64` dims, and `len` x `f64` values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Shape, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GMCKPT01";

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    offset: u64,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Index {
    blob: String,
    tensors: Vec<IndexEntry>,
    metadata: Value,
}

#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub metadata: Value,
}

fn paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("bin"), base.with_extension("json"))
}

impl Checkpoint {
    pub fn new(metadata: Value) -> Self {
        Checkpoint {
            tensors: Vec::new(),
            metadata,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Writes `<base>.bin` and `<base>.json`.
    pub fn save(&self, base: &Path) -> Result<()> {
        let (bin, json) = paths(base);
        let mut blob = MAGIC.to_vec();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let dims = t.shape().dims();
            blob.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in &dims {
                blob.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            entries.push(IndexEntry {
                name: name.clone(),
                offset: blob.len() as u64,
                shape: dims,
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let index = Index {
            blob: bin.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            tensors: entries,
            metadata: self.metadata.clone(),
        };
        fs::write(&bin, blob).map_err(|e| Error::io(bin.display().to_string(), e))?;
        let text = serde_json::to_string_pretty(&index).map_err(|e| Error::json("checkpoint index", e))?;
        fs::write(&json, text).map_err(|e| Error::io(json.display().to_string(), e))
    }

    pub fn load(base: &Path) -> Result<Checkpoint> {
        let (bin, json) = paths(base);
        let text = fs::read_to_string(&json).map_err(|e| Error::io(json.display().to_string(), e))?;
        let index: Index = serde_json::from_str(&text).map_err(|e| Error::json(json.display().to_string(), e))?;
        let blob = fs::read(&bin).map_err(|e| Error::io(bin.display().to_string(), e))?;
        if blob.len() < MAGIC.len() || &blob[..MAGIC.len()] != MAGIC {
            return Err(Error::Data(format!("{}: bad checkpoint magic", bin.display())));
        }
        let corrupt = |what: &str| Error::Data(format!("{}: {what}", bin.display()));
        let mut tensors = Vec::with_capacity(index.tensors.len());
        for entry in index.tensors {
            let shape = Shape::from_dims(&entry.shape)?;
            let offset = entry.offset as usize;
            let header_len = 4 + 8 * entry.shape.len();
            let header = offset
                .checked_sub(header_len)
                .and_then(|s| blob.get(s..offset))
                .ok_or_else(|| corrupt("header out of range"))?;
            let rank = u32::from_le_bytes(header[..4].try_into().expect("4 bytes")) as usize;
            let dims: Vec<usize> = header[4..]
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
                .collect();
            if rank != entry.shape.len() || dims != entry.shape {
                return Err(corrupt(&format!("shape header of {} disagrees with index", entry.name)));
            }
            let bytes = blob
                .get(offset..offset + 8 * shape.len())
                .ok_or_else(|| corrupt(&format!("data of {} out of range", entry.name)))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((entry.name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint {
            tensors,
            metadata: index.metadata,
        })
    }
}
