use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_rope_theta() -> f32 {
    10000.0
}

fn default_rmsnorm_eps() -> f32 {
    1e-5
}

/// Decoder hyper-parameters. Serialized with exactly these field names.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f32,
    #[serde(default = "default_rmsnorm_eps")]
    pub rmsnorm_eps: f32,
}

impl ModelConfig {
    /// A config with the default rope theta and norm epsilon.
    pub fn new(
        vocab_size: usize,
        d_model: usize,
        n_heads: usize,
        n_layers: usize,
        d_ff: usize,
        max_seq_len: usize,
    ) -> Self {
        ModelConfig {
            vocab_size,
            d_model,
            n_heads,
            n_layers,
            d_ff,
            max_seq_len,
            rope_theta: default_rope_theta(),
            rmsnorm_eps: default_rmsnorm_eps(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "head_dim {} must be even for rotary embeddings",
                self.head_dim()
            )));
        }
        if !(self.rope_theta > 0.0) || !(self.rmsnorm_eps > 0.0) {
            return Err(Error::InvalidConfig("rope_theta and rmsnorm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Checks the extents split across `devices`: heads, feed-forward width
    /// and d_model (embedding and output head).
    pub fn validate_for_devices(&self, devices: usize) -> Result<()> {
        self.validate()?;
        if devices == 0 {
            return Err(Error::InvalidConfig("device count must be positive".into()));
        }
        for (axis, extent) in [(1, self.n_heads), (1, self.d_ff), (1, self.d_model)] {
            if extent % devices != 0 {
                return Err(Error::Divisibility {
                    axis,
                    extent,
                    devices,
                });
            }
        }
        Ok(())
    }
}
