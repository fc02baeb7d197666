//! Checkpoint container: `b"A2VK"`, a little-endian `u32` header length,
//! a JSON manifest, then raw little-endian `f64` payloads.
//!
//! The manifest lists `{name, shape, dtype, offset}` per tensor, with
//! `offset` counted in bytes from the start of the payload, plus a free-form
//! `meta` object for architecture and training state.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"A2VK";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("bad checkpoint magic")]
    Magic,
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("unsupported dtype `{0}`")]
    Dtype(String),
    #[error("checkpoint is missing tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has shape {found:?} in checkpoint, model expects {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    /// Adds every parameter of `store` under `prefix + name`.
    pub fn push_params(&mut self, store: &ParamStore, prefix: &str) {
        for (_, p) in store.iter() {
            self.push(format!("{prefix}{}", p.name), p.value.clone());
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrites every parameter in `store` with the tensor named
    /// `prefix + name`; missing names and shape disagreements are errors.
    pub fn restore_params(
        &self,
        store: &mut ParamStore,
        prefix: &str,
    ) -> Result<(), CheckpointError> {
        for p in store.iter_mut() {
            let key = format!("{prefix}{}", p.name);
            let t = self
                .get(&key)
                .ok_or_else(|| CheckpointError::Missing(key.clone()))?;
            if t.shape() != p.value.shape() {
                return Err(CheckpointError::Shape {
                    name: key,
                    expected: p.value.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f64".into(),
                    offset,
                };
                offset += t.numel() * 8;
                e
            })
            .collect();
        let manifest = Manifest {
            meta: self.meta.clone(),
            tensors: entries,
        };
        let header = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 {
            return Err(CheckpointError::Truncated("header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header = bytes
            .get(8..8 + hlen)
            .ok_or(CheckpointError::Truncated("manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(header).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let payload = &bytes[8 + hlen..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            if e.dtype != "f64" {
                return Err(CheckpointError::Dtype(e.dtype));
            }
            let n: usize = e.shape.iter().product();
            let raw = payload
                .get(e.offset..e.offset + n * 8)
                .ok_or(CheckpointError::Truncated("payload"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(e.shape, data)
                .map_err(|err| CheckpointError::Manifest(err.to_string()))?;
            tensors.push((e.name, t));
        }
        Ok(Checkpoint {
            meta: manifest.meta,
            tensors,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    fs::write(path, ckpt.to_bytes()).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}
