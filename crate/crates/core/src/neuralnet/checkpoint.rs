//! Checkpoint files: a JSON manifest next to a little-endian `f32` blob.
//!
//! `model.json` holds the layer specs, parameter names/shapes/offsets, the
//! seed, the class list and its hash, and free-form metadata; `model.bin`
//! holds the raw parameters in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Network, NetworkSpec, Param};
use crate::error::{Error, Result};

const FORMAT: &str = "mcforge-net/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f32` elements into the blob.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    spec: NetworkSpec,
    seed: u64,
    classes: Vec<u32>,
    class_list_hash: String,
    params: Vec<ParamRecord>,
    blob: String,
    blob_sha256: String,
    #[serde(default)]
    meta: serde_json::Value,
}

/// A trained network with its class list.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub seed: u64,
    pub classes: Vec<u32>,
    pub params: Vec<Param<f32>>,
    pub meta: serde_json::Value,
}

pub fn class_list_hash(classes: &[u32]) -> String {
    let mut h = Sha256::new();
    for c in classes {
        h.update(c.to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl Checkpoint {
    pub fn from_network(net: &Network<f32>, seed: u64, classes: Vec<u32>, meta: serde_json::Value) -> Self {
        Checkpoint {
            spec: net.spec.clone(),
            seed,
            classes,
            params: net.params.clone(),
            meta,
        }
    }

    pub fn network(&self) -> Result<Network<f32>> {
        Network::from_parts(self.spec.clone(), self.params.clone())
    }

    pub fn class_list_hash(&self) -> String {
        class_list_hash(&self.classes)
    }

    fn blob_path(path: &Path) -> PathBuf {
        path.with_extension("bin")
    }

    fn blob_bytes(&self) -> Vec<u8> {
        let mut blob = Vec::with_capacity(self.params.iter().map(|p| p.data.len() * 4).sum());
        for p in &self.params {
            for v in &p.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        blob
    }

    /// Writes `path` (manifest) and `path` with extension `.bin` (blob).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let blob_path = Self::blob_path(path);
        let blob = self.blob_bytes();
        let mut offset = 0;
        let params = self
            .params
            .iter()
            .map(|p| {
                let rec = ParamRecord {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    offset,
                    len: p.data.len(),
                };
                offset += p.data.len();
                rec
            })
            .collect();
        let manifest = Manifest {
            format: FORMAT.into(),
            spec: self.spec.clone(),
            seed: self.seed,
            classes: self.classes.clone(),
            class_list_hash: self.class_list_hash(),
            params,
            blob: blob_path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            blob_sha256: hex::encode(Sha256::digest(&blob)),
            meta: self.meta.clone(),
        };
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
        let json = serde_json::to_vec_pretty(&manifest)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_slice(&text)?;
        if manifest.format != FORMAT {
            return Err(Error::UnsupportedFormat(format!("checkpoint format '{}'", manifest.format)));
        }
        if manifest.class_list_hash != class_list_hash(&manifest.classes) {
            return Err(Error::Integrity("class list hash mismatch".into()));
        }
        let blob_path = path.with_file_name(&manifest.blob);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        if hex::encode(Sha256::digest(&blob)) != manifest.blob_sha256 {
            return Err(Error::Integrity("parameter blob hash mismatch".into()));
        }
        let mut params = Vec::with_capacity(manifest.params.len());
        for rec in &manifest.params {
            let end = (rec.offset + rec.len) * 4;
            if end > blob.len() || rec.shape.iter().product::<usize>() != rec.len {
                return Err(Error::Malformed(format!("parameter '{}' out of range", rec.name)));
            }
            let data = blob[rec.offset * 4..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            params.push(Param {
                name: rec.name.clone(),
                shape: rec.shape.clone(),
                data,
            });
        }
        let ckpt = Checkpoint {
            spec: manifest.spec,
            seed: manifest.seed,
            classes: manifest.classes,
            params,
            meta: manifest.meta,
        };
        // validates names and shapes against the spec
        ckpt.network()?;
        Ok(ckpt)
    }
}
