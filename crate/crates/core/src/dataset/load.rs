use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::build::{DatasetSpec, MANIFEST};
use super::format::{read_chunk, sha256_hex};
use super::{NormSpec, Record, Split, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Records every file path a loader opens.
#[derive(Debug, Clone, Default)]
pub struct AccessAudit(Arc<Mutex<Vec<PathBuf>>>);

impl AccessAudit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, path: &Path) {
        let p = path.canonicalize().unwrap_or_else(|_| path.to_path_buf());
        self.0.lock().expect("audit lock").push(p);
    }

    pub fn paths(&self) -> Vec<PathBuf> {
        self.0.lock().expect("audit lock").clone()
    }

    /// Paths that do not live under `root`.
    pub fn outside(&self, root: &Path) -> Vec<PathBuf> {
        let root = root.canonicalize().unwrap_or_else(|_| root.to_path_buf());
        self.paths().into_iter().filter(|p| !p.starts_with(&root)).collect()
    }
}

fn read_file(path: &Path, audit: Option<&AccessAudit>) -> Result<Vec<u8>> {
    if let Some(a) = audit {
        a.record(path);
    }
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, audit: Option<&AccessAudit>) -> Result<T> {
    let bytes = read_file(path, audit)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkEntry {
    pub file: String,
    pub split: Split,
    pub count: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceManifest {
    pub version: u32,
    pub device: usize,
    pub position: [f64; 3],
    pub image_shape: [usize; 3],
    pub echo_shape: [usize; 3],
    pub counts: BTreeMap<Split, usize>,
    pub chunks: Vec<ChunkEntry>,
    pub norm: NormSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootManifest {
    pub version: u32,
    pub spec: DatasetSpec,
    pub devices: Vec<String>,
    pub agg: String,
    pub device_positions: Vec<[f64; 3]>,
    pub records_per_device: Vec<usize>,
    pub rejected: Vec<String>,
    /// SHA-256 of every written file, keyed by path relative to the root.
    pub files: BTreeMap<String, String>,
}

impl RootManifest {
    pub fn open(root: &Path) -> Result<Self> {
        let m: RootManifest = read_json(&root.join(MANIFEST), None)?;
        if m.version != FORMAT_VERSION {
            return Err(Error::Corrupt {
                path: root.join(MANIFEST),
                reason: format!("unsupported format version {}", m.version),
            });
        }
        Ok(m)
    }
}

/// Where a record lives: device, split and position within that split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Locator {
    pub device: usize,
    pub split: Split,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinEntry {
    pub frame: usize,
    pub target: usize,
    pub split: Split,
    /// One locator per device, in device order.
    pub locators: Vec<Locator>,
}

/// `D_agg`: joins the records of one (frame, target) across all devices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggIndex {
    pub version: u32,
    pub devices: Vec<String>,
    pub entries: Vec<JoinEntry>,
}

impl AggIndex {
    pub fn open(dir: &Path) -> Result<Self> {
        let a: AggIndex = read_json(&dir.join(MANIFEST), None)?;
        if a.version != FORMAT_VERSION {
            return Err(Error::Corrupt {
                path: dir.join(MANIFEST),
                reason: format!("unsupported format version {}", a.version),
            });
        }
        Ok(a)
    }

    pub fn split(&self, split: Split) -> Vec<&JoinEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

/// One device dataset held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DeviceManifest,
    pub train: Vec<Record>,
    pub val: Vec<Record>,
}

/// Indices into one split.
pub type Batch = Vec<usize>;

impl Dataset {
    /// Loads every chunk, verifying build-time checksums.
    pub fn open(dir: &Path, audit: Option<&AccessAudit>) -> Result<Self> {
        let manifest: DeviceManifest = read_json(&dir.join(MANIFEST), audit)?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::Corrupt {
                path: dir.join(MANIFEST),
                reason: format!("unsupported format version {}", manifest.version),
            });
        }
        let mut train = Vec::new();
        let mut val = Vec::new();
        for c in &manifest.chunks {
            let path = dir.join(&c.file);
            let bytes = read_file(&path, audit)?;
            if sha256_hex(&bytes) != c.sha256 {
                return Err(Error::Corrupt {
                    path,
                    reason: "checksum differs from build time".into(),
                });
            }
            let (header, recs) = read_chunk(&bytes, &path)?;
            if header.split != c.split || recs.len() != c.count {
                return Err(Error::Corrupt {
                    path,
                    reason: "chunk disagrees with manifest".into(),
                });
            }
            match c.split {
                Split::Train => train.extend(recs),
                Split::Val => val.extend(recs),
            }
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
            train,
            val,
        })
    }

    pub fn records(&self, split: Split) -> &[Record] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    pub fn len(&self, split: Split) -> usize {
        self.records(split).len()
    }

    /// Index batches over a split; shuffled deterministically when `shuffle_seed` is given.
    pub fn batches(&self, split: Split, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Batch> {
        batch_indices(self.len(split), batch_size, shuffle_seed)
    }
}

pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Batch> {
    let mut idx: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        idx.shuffle(&mut rng::stream(seed, &[tag::SHUFFLE]));
    }
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
