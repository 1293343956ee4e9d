use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::LoraSettings;

fn d_lora_r() -> usize {
    16
}
fn d_lora_alpha() -> f32 {
    16.0
}
fn d_lora_dropout() -> f32 {
    0.05
}
fn d_lora_a_std() -> f32 {
    crate::lora::DEFAULT_A_STD
}
fn d_one() -> usize {
    1
}
fn d_learning_rate() -> f32 {
    1e-4
}
fn d_max_len() -> usize {
    512
}

/// Training run configuration, read from JSON with exactly these field
/// names. `base_params_path` and `n_steps` are required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub base_params_path: PathBuf,
    #[serde(default = "d_lora_r")]
    pub lora_r: usize,
    #[serde(default = "d_lora_alpha")]
    pub lora_alpha: f32,
    #[serde(default = "d_lora_dropout")]
    pub lora_dropout: f32,
    #[serde(default = "d_lora_a_std")]
    pub lora_a_std: f32,
    #[serde(default = "d_one")]
    pub n_devices: usize,
    #[serde(default = "d_one")]
    pub batch_size: usize,
    #[serde(default = "d_learning_rate")]
    pub learning_rate: f32,
    pub n_steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mask_prompt: bool,
    #[serde(default = "d_max_len")]
    pub max_len: usize,
}

impl TrainConfig {
    /// Defaults for everything but the base path and step count.
    pub fn new(base_params_path: impl Into<PathBuf>, n_steps: usize) -> Self {
        TrainConfig {
            base_params_path: base_params_path.into(),
            lora_r: d_lora_r(),
            lora_alpha: d_lora_alpha(),
            lora_dropout: d_lora_dropout(),
            lora_a_std: d_lora_a_std(),
            n_devices: 1,
            batch_size: 1,
            learning_rate: d_learning_rate(),
            n_steps,
            seed: 0,
            mask_prompt: false,
            max_len: d_max_len(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.lora_r == 0 {
            return fail("lora_r must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return fail(format!("lora_dropout must be in [0, 1), got {}", self.lora_dropout));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.lora_a_std > 0.0) {
            return fail(format!("lora_a_std must be positive, got {}", self.lora_a_std));
        }
        if self.n_devices == 0 || self.batch_size == 0 {
            return fail("n_devices and batch_size must be at least 1".into());
        }
        if self.max_len < 2 {
            return fail(format!("max_len must be at least 2, got {}", self.max_len));
        }
        Ok(())
    }

    pub fn lora_settings(&self) -> LoraSettings {
        LoraSettings {
            r: self.lora_r,
            alpha: self.lora_alpha,
            dropout_p: self.lora_dropout,
            a_std: self.lora_a_std,
        }
    }
}
