//! Run configuration: one TOML document with a section per stage. Every
//! field has a default, so an empty file is the default run.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::CountPolicy;
use crate::error::{Error, Result};
use crate::evaluate::InferenceConfig;
use crate::gtransformer::AttentionKind;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

/// Synthetic dataset sizes and generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 200,
            val_scenes: 50,
            test_scenes: 50,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub data: DataConfig,
}

/// Command-line overrides; `None` keeps the file value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub attention: Option<AttentionKind>,
    pub no_residual: bool,
    pub no_euclid: bool,
    pub det_only: bool,
    pub iou_thresh: Option<f64>,
    pub policy: Option<CountPolicy>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.inference.validate()?;
        self.data.synth.validate()
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(epochs) = o.epochs {
            self.train.epochs = epochs;
        }
        if let Some(lr) = o.lr {
            self.train.lr = lr;
        }
        if let Some(kind) = o.attention {
            self.model.transformer.attention = kind;
        }
        if o.no_residual {
            self.model.transformer.use_residual = false;
        }
        if o.no_euclid {
            self.model.use_euclidean = false;
        }
        if o.det_only {
            self.model.encoder.det_only = true;
        }
        if let Some(t) = o.iou_thresh {
            self.inference.eval.iou_thresh = t;
        }
        if let Some(p) = o.policy {
            self.inference.policy = p;
        }
        self.validate()
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
