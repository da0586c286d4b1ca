use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::JointLossConfig;
use crate::matchnet::ModelConfig;
use crate::tensor::AdamConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Dataset directory holding the JSONL files.
    pub data: Option<PathBuf>,
    /// Pretrained word vectors in text format.
    pub embeddings: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossSettings,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without dev improvement before stopping; 0 disables.
    pub patience: usize,
    /// Negatives per mention.
    pub negatives: usize,
    /// Minimum corpus count for a word to get its own id.
    pub min_count: usize,
    /// Also evaluate the training split after every epoch.
    pub eval_train: bool,
    pub paths: PathsConfig,
}

/// Loss settings that are not implied by the model variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSettings {
    pub margin: f64,
    pub lambda: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        let d = JointLossConfig::default();
        Self {
            margin: d.margin,
            lambda: d.lambda,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            loss: LossSettings::default(),
            optimizer: AdamConfig::default(),
            batch_size: 16,
            epochs: 30,
            patience: 10,
            negatives: 9,
            min_count: 1,
            eval_train: false,
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn joint_loss(&self) -> JointLossConfig {
        JointLossConfig {
            margin: self.loss.margin,
            lambda: self.loss.lambda,
            enable_latent: self.model.variant.latent_in_score(),
            enable_known_type: self.model.variant.known_types(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.joint_loss().validate()?;
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("optimizer.lr must be positive, got {}", o.lr)));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps.is_nan() || o.eps <= 0.0 {
            return Err(Error::Config("optimizer betas must lie in [0, 1) and eps be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.negatives == 0 {
            return Err(Error::Config("negatives must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
