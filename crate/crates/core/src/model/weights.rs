//! Weight container: a raw little-endian f32 blob (`*.wtm`) described by a
//! JSON manifest next to it (`*.wtm.json`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

use super::ModelConfig;

pub const MANIFEST_FORMAT: &str = "wtm";
pub const MANIFEST_VERSION: u32 = 1;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("tensor {0:?} is missing from the weight file")]
    MissingTensor(String),
    #[error("tensor {name:?} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("corrupt weight file: {0}")]
    Corrupt(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ModelConfig>,
    pub tensors: Vec<TensorEntry>,
}

/// Named tensors, immutable once loaded.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    pub tensors: BTreeMap<String, Tensor>,
}

impl WeightStore {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    /// Check that every tensor the config needs is present with its exact shape.
    pub fn validate(&self, config: &ModelConfig) -> Result<(), WeightsError> {
        for (name, shape) in config.tensor_shapes() {
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| WeightsError::MissingTensor(name.clone()))?;
            if t.shape != shape {
                return Err(WeightsError::ShapeMismatch {
                    name,
                    expected: shape,
                    found: t.shape.clone(),
                });
            }
            if t.data.len() != shape.iter().product::<usize>() {
                return Err(WeightsError::Corrupt(format!(
                    "tensor {name:?} holds {} values for shape {shape:?}",
                    t.data.len()
                )));
            }
        }
        Ok(())
    }

    /// Write `path` (blob) and `path.json` (manifest). Tensors are laid out
    /// back to back in name order.
    pub fn save(&self, path: &Path, config: Option<&ModelConfig>) -> Result<(), WeightsError> {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                dtype: "f32".into(),
                offset: blob.len() as u64,
            });
            blob.reserve(t.data.len() * 4);
            for x in &t.data {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            config: config.copied(),
            tensors: entries,
        };
        let io = |source| WeightsError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&blob).map_err(io)?;
        let mpath = manifest_path(path);
        let json = serde_json::to_vec_pretty(&manifest)
            .map_err(|e| WeightsError::Corrupt(e.to_string()))?;
        fs::write(&mpath, json).map_err(|source| WeightsError::Io {
            path: mpath.clone(),
            source,
        })
    }
}

pub fn manifest_path(blob: &Path) -> PathBuf {
    let mut s = blob.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, WeightsError> {
    let mpath = manifest_path(path);
    let bytes = fs::read(&mpath).map_err(|source| WeightsError::Io {
        path: mpath.clone(),
        source,
    })?;
    let manifest: Manifest = serde_json::from_slice(&bytes)
        .map_err(|e| WeightsError::Corrupt(format!("manifest: {e}")))?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
        return Err(WeightsError::Corrupt(format!(
            "unsupported manifest {} v{}",
            manifest.format, manifest.version
        )));
    }
    Ok(manifest)
}

/// Load every tensor named in the manifest, then validate against `config`.
pub fn load_weights(path: &Path, config: &ModelConfig) -> Result<WeightStore, WeightsError> {
    let manifest = read_manifest(path)?;
    let blob = fs::read(path).map_err(|source| WeightsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut store = WeightStore::default();
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(WeightsError::Corrupt(format!(
                "tensor {:?} has unsupported dtype {:?}",
                entry.name, entry.dtype
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let start = usize::try_from(entry.offset)
            .map_err(|_| WeightsError::Corrupt(format!("offset of {:?} overflows", entry.name)))?;
        let end = start
            .checked_add(numel * 4)
            .filter(|&end| end <= blob.len())
            .ok_or_else(|| {
                WeightsError::Corrupt(format!(
                    "tensor {:?} runs past the end of the {}-byte blob",
                    entry.name,
                    blob.len()
                ))
            })?;
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        store.insert(
            entry.name.clone(),
            Tensor {
                shape: entry.shape.clone(),
                data,
            },
        );
    }
    store.validate(config)?;
    Ok(store)
}

/// GPT-2 style initialization: N(0, 0.02) for matrices and embeddings,
/// residual projections scaled by 1/sqrt(2 * n_layers), zero biases and unit
/// layernorm gains.
pub fn init_random(config: &ModelConfig, seed: u64) -> WeightStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = Normal::new(0.0f64, INIT_STD).expect("valid std");
    let resid = Normal::new(0.0f64, INIT_STD / (2.0 * config.n_layers as f64).sqrt())
        .expect("valid std");
    let mut store = WeightStore::default();
    for (name, shape) in config.tensor_shapes() {
        let mut t = Tensor::zeros(shape);
        if name.ends_with(".bias") {
            // zeros
        } else if name.contains("ln_") {
            t.data.fill(1.0);
        } else {
            let dist = if name.ends_with("c_proj.weight") {
                &resid
            } else {
                &base
            };
            for x in &mut t.data {
                *x = dist.sample(&mut rng) as f32;
            }
        }
        store.insert(name, t);
    }
    store
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Preset;

    fn tiny() -> ModelConfig {
        let mut c = Preset::Toy.config(50);
        c.d_model = 16;
        c.d_ff = 64;
        c.n_heads = 2;
        c.context_len = 32;
        c
    }

    #[test]
    fn init_is_deterministic() {
        let c = tiny();
        assert_eq!(init_random(&c, 7), init_random(&c, 7));
        assert_ne!(init_random(&c, 7), init_random(&c, 8));
        init_random(&c, 7).validate(&c).unwrap();
    }

    #[test]
    fn init_statistics() {
        let c = tiny();
        let w = init_random(&c, 1);
        let wte = &w.get("wte").unwrap().data;
        let mean = wte.iter().map(|&x| x as f64).sum::<f64>() / wte.len() as f64;
        let var = wte.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / wte.len() as f64;
        assert!(mean.abs() < 0.005);
        assert!((var.sqrt() - 0.02).abs() < 0.003);
        assert!(w.get("h.0.ln_1.weight").unwrap().data.iter().all(|&x| x == 1.0));
        assert!(w.get("h.1.mlp.c_fc.bias").unwrap().data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.wtm");
        let c = tiny();
        let w = init_random(&c, 3);
        w.save(&path, Some(&c)).unwrap();
        assert!(manifest_path(&path).exists());
        let back = load_weights(&path, &c).unwrap();
        assert_eq!(w, back);
        assert_eq!(read_manifest(&path).unwrap().config, Some(c));
    }

    #[test]
    fn missing_tensor_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.wtm");
        let c = tiny();
        let mut w = init_random(&c, 3);
        w.remove("h.1.mlp.c_proj.weight");
        w.save(&path, None).unwrap();
        match load_weights(&path, &c) {
            Err(WeightsError::MissingTensor(name)) => assert_eq!(name, "h.1.mlp.c_proj.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.wtm");
        let c = tiny();
        let mut w = init_random(&c, 3);
        w.insert("ln_f.bias", Tensor::zeros(vec![17]));
        w.save(&path, None).unwrap();
        assert!(matches!(
            load_weights(&path, &c),
            Err(WeightsError::ShapeMismatch { ref name, .. }) if name == "ln_f.bias"
        ));

        let w = init_random(&c, 3);
        w.save(&path, None).unwrap();
        let blob = fs::read(&path).unwrap();
        fs::write(&path, &blob[..blob.len() - 8]).unwrap();
        assert!(matches!(load_weights(&path, &c), Err(WeightsError::Corrupt(_))));

        fs::write(manifest_path(&path), b"{not json").unwrap();
        assert!(matches!(load_weights(&path, &c), Err(WeightsError::Corrupt(_))));

        let missing = dir.path().join("nope.wtm");
        assert!(matches!(load_weights(&missing, &c), Err(WeightsError::Io { .. })));
    }
}
