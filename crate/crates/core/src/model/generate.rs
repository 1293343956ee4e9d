//! Autoregressive decoding with full recompute per step (no KV cache).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, weighted::WeightedIndex};

use crate::error::{Error, Result};
use crate::lora::{LoraAdapterSet, Mode};
use crate::model::{forward, ModelConfig, ModelParams};
use crate::tensor::ops;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    pub max_new_tokens: usize,
    /// Argmax decoding; otherwise sample from `softmax(logits / temperature)`.
    pub greedy: bool,
    pub temperature: f32,
    pub seed: u64,
    /// Generation stops after emitting this token (it is not returned).
    pub stop_token: Option<u32>,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            max_new_tokens: 64,
            greedy: true,
            temperature: 1.0,
            seed: 0,
            stop_token: Some(crate::data::EOS),
        }
    }
}

/// Continues `prompt` and returns only the new tokens. When the context
/// outgrows `max_seq_len`, the oldest tokens are dropped.
pub fn generate(
    config: &ModelConfig,
    params: &ModelParams,
    adapters: Option<&LoraAdapterSet>,
    prompt: &[u32],
    options: &GenerateOptions,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::InvalidShape {
            op: "generate",
            reason: "empty prompt".into(),
        });
    }
    if !options.greedy && !(options.temperature > 0.0) {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut context = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < options.max_new_tokens {
        let start = context.len().saturating_sub(config.max_seq_len);
        let logits = forward(config, params, adapters, &context[start..], Mode::Eval, None)?;
        let last = logits.shape()[0] - 1;
        let next = if options.greedy {
            ops::argmax_row(&logits, last)?
        } else {
            let v = config.vocab_size;
            let row = &logits.data()[last * v..(last + 1) * v];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let weights: Vec<f64> = row
                .iter()
                .map(|&l| (((l - max) / options.temperature) as f64).exp())
                .collect();
            WeightedIndex::new(&weights)
                .map_err(|e| Error::InvalidConfig(format!("sampling weights: {e}")))?
                .sample(&mut rng)
        } as u32;
        if Some(next) == options.stop_token {
            break;
        }
        out.push(next);
        context.push(next);
    }
    Ok(out)
}
