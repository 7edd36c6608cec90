use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::{Layer, MlpConfig, SampleNetModel};
use crate::data::Whitening;
use crate::diffmath::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "samplenet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerRecord {
    in_dim: usize,
    out_dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

/// On-disk model: architecture, flat parameters and the input whitening
/// needed to reproduce predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: Option<u64>,
    pub config: MlpConfig,
    layers: Vec<LayerRecord>,
    pub whitening: Option<Whitening>,
    /// Free-form run metadata (method, loss config, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model(model: &SampleNetModel, seed: Option<u64>, whitening: Option<Whitening>) -> Self {
        let layers = model
            .layers()
            .iter()
            .map(|l| LayerRecord {
                in_dim: l.weight.shape()[0],
                out_dim: l.weight.shape()[1],
                weight: l.weight.data().to_vec(),
                bias: l.bias.data().to_vec(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            seed,
            config: model.config().clone(),
            layers,
            whitening,
            meta: serde_json::Value::Null,
        }
    }

    pub fn model(&self) -> Result<SampleNetModel> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let layers = self
            .layers
            .iter()
            .map(|r| {
                Ok(Layer {
                    weight: Tensor::new(vec![r.in_dim, r.out_dim], r.weight.clone())?,
                    bias: Tensor::new(vec![r.out_dim], r.bias.clone())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        SampleNetModel::from_layers(self.config.clone(), layers)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let text = serde_json::to_string_pretty(ckpt)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
