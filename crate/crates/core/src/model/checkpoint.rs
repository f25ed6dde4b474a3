//! Self-describing checkpoint file: config, named 64-bit weight tensors,
//! split seed, and a format version for forward compatibility.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, ParamSet};
use crate::error::{AxError, Result};
use crate::model::{Model, ModelConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub model: ModelConfig,
    pub split_seed: u64,
    /// Default anomaly threshold (99th percentile of validation scores).
    #[serde(default)]
    pub detect_threshold: Option<f64>,
    pub weights: Vec<NamedTensor>,
}

impl ModelCheckpoint {
    pub fn from_model(model: &Model, split_seed: u64) -> Self {
        let weights = model
            .params
            .iter()
            .map(|(name, m)| NamedTensor {
                name: name.clone(),
                rows: m.nrows(),
                cols: m.ncols(),
                data: m.iter().cloned().collect(),
            })
            .collect();
        ModelCheckpoint {
            format_version: CHECKPOINT_VERSION,
            model: model.cfg.clone(),
            split_seed,
            detect_threshold: None,
            weights,
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        if self.format_version > CHECKPOINT_VERSION {
            return Err(AxError::CheckpointVersion {
                found: self.format_version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let mut params = ParamSet::new();
        for t in &self.weights {
            if t.data.len() != t.rows * t.cols {
                return Err(AxError::Serde(format!(
                    "tensor '{}' declares {}x{} but holds {} values",
                    t.name,
                    t.rows,
                    t.cols,
                    t.data.len()
                )));
            }
            let m = Mat::from_shape_vec((t.rows, t.cols), t.data.clone())
                .map_err(|e| AxError::Serde(e.to_string()))?;
            params.insert(t.name.clone(), m);
        }
        Model::from_parts(self.model.clone(), params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        for t in &self.weights {
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(AxError::Numerical(format!(
                    "tensor '{}' holds non-finite values",
                    t.name
                )));
            }
        }
        let file = File::create(path).map_err(|e| AxError::io(path.display().to_string(), e))?;
        serde_json::to_writer(BufWriter::new(file), self)
            .map_err(|e| AxError::Serde(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| AxError::io(path.display().to_string(), e))?;
        let ckpt: ModelCheckpoint = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| AxError::Serde(e.to_string()))?;
        if ckpt.format_version > CHECKPOINT_VERSION {
            return Err(AxError::CheckpointVersion {
                found: ckpt.format_version,
                supported: CHECKPOINT_VERSION,
            });
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelVariant;
    use tempfile::tempdir;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            variant: ModelVariant::Sf,
            n_encoder_layers: 1,
            attention: crate::attention::AttentionConfig {
                d_model: 8,
                n_heads_hi: 2,
                n_heads_lo: 0,
                ..Default::default()
            },
            elt_kernel: 3,
            mean_kernel: 3,
            variance_kernel: 3,
            src_len: 16,
            tgt_len: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let model = Model::new(small_cfg(), 42).unwrap();
        let ckpt = ModelCheckpoint::from_model(&model, 7);
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.json");
        ckpt.save(&path).unwrap();
        let loaded = ModelCheckpoint::load(&path).unwrap();
        assert_eq!(ckpt, loaded);
        let back = loaded.to_model().unwrap();
        for (name, m) in model.params.iter() {
            let l = back.params.get(name).unwrap();
            for (a, b) in m.iter().zip(l.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "tensor {name}");
            }
        }
    }

    #[test]
    fn future_version_is_rejected() {
        let model = Model::new(small_cfg(), 1).unwrap();
        let mut ckpt = ModelCheckpoint::from_model(&model, 1);
        ckpt.format_version = CHECKPOINT_VERSION + 1;
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.json");
        let json = serde_json::to_string(&ckpt).unwrap();
        std::fs::write(&path, json).unwrap();
        assert!(matches!(
            ModelCheckpoint::load(&path),
            Err(AxError::CheckpointVersion { .. })
        ));
    }
}
