//! Folding trained adapters into the base weights.

use std::path::Path;

use crate::convert::{read_base, write_base};
use crate::error::{Error, Result};
use crate::lora::{merge_input_major, LoraAdapterSet};
use crate::model::{ModelConfig, ModelParams};
use crate::train::load_checkpoint;

/// Checks that an adapter set was trained for `base`.
pub fn check_compatible(base: &ModelConfig, adapter: &ModelConfig) -> Result<()> {
    let fields = [
        ("d_model", base.d_model, adapter.d_model),
        ("n_layers", base.n_layers, adapter.n_layers),
        ("n_heads", base.n_heads, adapter.n_heads),
        ("vocab_size", base.vocab_size, adapter.vocab_size),
        ("d_ff", base.d_ff, adapter.d_ff),
    ];
    for (field, b, a) in fields {
        if b != a {
            return Err(Error::ConfigMismatch {
                field,
                base: b.to_string(),
                adapter: a.to_string(),
            });
        }
    }
    Ok(())
}

/// Base parameters with every adapted `wq`/`wv` replaced by
/// `W + (alpha/r)·(B·A)ᵀ`; all other tensors are shared unchanged.
pub fn merge_params(params: &ModelParams, adapters: &LoraAdapterSet) -> Result<ModelParams> {
    if params.layers.len() != adapters.layers.len() {
        return Err(Error::ConfigMismatch {
            field: "n_layers",
            base: params.layers.len().to_string(),
            adapter: adapters.layers.len().to_string(),
        });
    }
    let mut merged = params.clone();
    for (layer, ad) in merged.layers.iter_mut().zip(&adapters.layers) {
        layer.wq = merge_input_major(&layer.wq, &ad.q)?;
        layer.wv = merge_input_major(&layer.wv, &ad.v)?;
    }
    Ok(merged)
}

/// Reads a base container and an adapter checkpoint and writes the merged
/// model as a standalone base container.
pub fn merge_command(base_path: &Path, adapter_path: &Path, save_path: &Path) -> Result<()> {
    let (config, params) = read_base(base_path)?;
    let (adapters, meta) = load_checkpoint(adapter_path)?;
    check_compatible(&config, &meta.model_config)?;
    let merged = merge_params(&params, &adapters)?;
    write_base(&merged, &config, save_path)
}
