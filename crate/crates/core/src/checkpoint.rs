//! Checkpoint directories: `manifest.json` describing every tensor plus
//! run metadata, and `weights.bin` holding little-endian f32 data in
//! manifest order.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT: &str = "congan-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub kind: String,
    pub iteration: u64,
    pub config: serde_json::Value,
    pub rng_state: Option<ChaCha8Rng>,
    /// Free-form scalars such as optimizer step counts.
    pub extra: serde_json::Value,
    pub entries: Vec<ManifestEntry>,
}

/// Named f32 tensors with run metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub iteration: u64,
    pub config: serde_json::Value,
    pub rng_state: Option<ChaCha8Rng>,
    pub extra: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, config: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            iteration: 0,
            config,
            rng_state: None,
            extra: serde_json::Value::Null,
            tensors: Vec::new(),
        }
    }

    /// Appends every tensor of `set` as `{prefix}/{name}`.
    pub fn push_params(&mut self, prefix: &str, set: &ParamSet<f32>) {
        for (name, t) in set.names().iter().zip(set.tensors()) {
            self.tensors.push((format!("{prefix}/{name}"), t.clone()));
        }
    }

    pub fn push_tensors(&mut self, prefix: &str, names: &[String], tensors: &[Tensor<f32>]) {
        for (name, t) in names.iter().zip(tensors) {
            self.tensors.push((format!("{prefix}/{name}"), t.clone()));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}/");
        self.tensors.iter().any(|(n, _)| n.starts_with(&p))
    }

    /// Overwrites every tensor of `set` from `{prefix}/{name}`; all must be present with matching shapes.
    pub fn load_params(&self, prefix: &str, set: &mut ParamSet<f32>) -> Result<()> {
        let names = set.names().to_vec();
        let loaded = self.tensors_for(prefix, &names, set.tensors())?;
        for (dst, src) in set.tensors_mut().iter_mut().zip(loaded) {
            *dst = src;
        }
        Ok(())
    }

    /// Tensors `{prefix}/{name}` for each name, checked against `like` shapes.
    pub fn tensors_for(&self, prefix: &str, names: &[String], like: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        names
            .iter()
            .zip(like)
            .map(|(name, want)| {
                let key = format!("{prefix}/{name}");
                let t = self.get(&key).ok_or_else(|| Error::Corrupt {
                    path: MANIFEST_FILE.into(),
                    detail: format!("missing tensor {key}"),
                })?;
                if t.shape() != want.shape() {
                    return Err(Error::Corrupt {
                        path: MANIFEST_FILE.into(),
                        detail: format!("{key} has shape {:?}, config implies {:?}", t.shape(), want.shape()),
                    });
                }
                Ok(t.clone())
            })
            .collect()
    }

    fn manifest_and_blob(&self) -> (Manifest, Vec<u8>) {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = blob.len() as u64;
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
                length: blob.len() as u64 - offset,
            });
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            kind: self.kind.clone(),
            iteration: self.iteration,
            config: self.config.clone(),
            rng_state: self.rng_state.clone(),
            extra: self.extra.clone(),
            entries,
        };
        (manifest, blob)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (manifest, blob) = self.manifest_and_blob();
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        fs::write(dir.join(WEIGHTS_FILE), blob)?;
        fs::write(dir.join(MANIFEST_FILE), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let wpath = dir.join(WEIGHTS_FILE);
        let manifest: Manifest = serde_json::from_slice(&fs::read(&mpath)?).map_err(|e| Error::Corrupt {
            path: mpath.display().to_string(),
            detail: e.to_string(),
        })?;
        let blob = fs::read(&wpath)?;
        let corrupt = |detail: String| Error::Corrupt {
            path: wpath.display().to_string(),
            detail,
        };
        if manifest.format != FORMAT {
            return Err(Error::Corrupt {
                path: mpath.display().to_string(),
                detail: format!("unknown format {:?}", manifest.format),
            });
        }
        let mut expected_offset = 0u64;
        let mut tensors = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            if e.dtype != "f32" {
                return Err(corrupt(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let numel: usize = e.shape.iter().product();
            if e.offset != expected_offset || e.length != 4 * numel as u64 {
                return Err(corrupt(format!(
                    "{}: offset {} length {} inconsistent with shape {:?}",
                    e.name, e.offset, e.length, e.shape
                )));
            }
            let end = e.offset + e.length;
            if end > blob.len() as u64 {
                return Err(corrupt(format!("{}: needs bytes up to {end}, blob has {}", e.name, blob.len())));
            }
            let data = blob[e.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::new(&e.shape, data).map_err(|err| corrupt(format!("{}: {err}", e.name)))?;
            tensors.push((e.name.clone(), t));
            expected_offset = end;
        }
        if expected_offset != blob.len() as u64 {
            return Err(corrupt(format!(
                "blob has {} bytes, manifest accounts for {expected_offset}",
                blob.len()
            )));
        }
        Ok(Self {
            kind: manifest.kind,
            iteration: manifest.iteration,
            config: manifest.config,
            rng_state: manifest.rng_state,
            extra: manifest.extra,
            tensors,
        })
    }

    /// Reads only the manifest, for listings.
    pub fn read_manifest(dir: &Path) -> Result<Manifest> {
        let mpath = dir.join(MANIFEST_FILE);
        serde_json::from_slice(&fs::read(&mpath)?).map_err(|e| Error::Corrupt {
            path: mpath.display().to_string(),
            detail: e.to_string(),
        })
    }
}
