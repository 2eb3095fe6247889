//! Flat checkpoint archive: one JSON index line, then raw little-endian payloads in index order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::float::{DType, Float};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Byte offset relative to the start of the payload section.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub version: u32,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Tensors of a checkpoint, in index order.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Float> Checkpoint<T> {
    pub fn from_store(store: &ParamStore<T>, prefixes: &[&str], meta: serde_json::Value) -> Self {
        let tensors = store
            .iter()
            .filter(|(_, p)| prefixes.is_empty() || prefixes.iter().any(|pre| p.name.starts_with(pre)))
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        Checkpoint { meta, tensors }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: T::DTYPE,
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel() * T::DTYPE.size();
        }
        let index = CheckpointIndex {
            version: CHECKPOINT_VERSION,
            meta: self.meta.clone(),
            tensors: entries,
        };
        let mut out = serde_json::to_vec(&index)?;
        out.push(b'\n');
        out.reserve(offset);
        for (_, t) in &self.tensors {
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| corrupt("missing index line".into()))?;
        let index: CheckpointIndex =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| corrupt(format!("bad index: {e}")))?;
        if index.version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {}", index.version)));
        }
        let payload = &bytes[nl + 1..];
        let mut tensors = Vec::with_capacity(index.tensors.len());
        for e in &index.tensors {
            if e.dtype != T::DTYPE {
                return Err(corrupt(format!("tensor `{}` has dtype {}", e.name, e.dtype.name())));
            }
            let numel: usize = e.shape.iter().product();
            let end = e.offset + numel * e.dtype.size();
            if end > payload.len() {
                return Err(corrupt(format!("tensor `{}` runs past end of file", e.name)));
            }
            let data = payload[e.offset..end].chunks_exact(e.dtype.size()).map(T::read_le).collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        }
        Ok(Checkpoint {
            meta: index.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Copies tensors into matching store entries; every tensor must exist in `store` with the same shape.
    pub fn apply(&self, store: &mut ParamStore<T>) -> Result<usize> {
        for (name, t) in &self.tensors {
            let id = store
                .id(name)
                .ok_or_else(|| Error::MissingArtifact(format!("parameter `{name}` not present in model")))?;
            let p = store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::shape("checkpoint apply", p.value.shape(), t.shape()));
            }
            p.value = t.clone();
        }
        Ok(self.tensors.len())
    }
}
