//! Adapter checkpoints: only LoRA factors and their metadata, never base
//! weights.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::convert::{read_container, write_container};
use crate::error::{Error, Result};
use crate::lora::{tensor_name, LayerAdapters, LoraAdapter, LoraAdapterSet, Target};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub const ADAPTER_KIND: &str = "lora_adapter";

/// Metadata stored alongside the adapter factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub r: usize,
    pub alpha: f32,
    pub dropout_p: f32,
    pub model_config: ModelConfig,
    #[serde(default)]
    pub train_config: Option<TrainConfig>,
    /// Optimizer steps taken when the checkpoint was written.
    #[serde(default)]
    pub step: usize,
}

impl CheckpointMeta {
    pub fn new(adapters: &LoraAdapterSet, model_config: &ModelConfig) -> Result<Self> {
        let first = adapters
            .layers
            .first()
            .ok_or_else(|| Error::InvalidConfig("adapter set has no layers".into()))?;
        Ok(CheckpointMeta {
            kind: ADAPTER_KIND.into(),
            r: first.q.rank(),
            alpha: first.q.alpha(),
            dropout_p: first.q.dropout_p(),
            model_config: *model_config,
            train_config: None,
            step: 0,
        })
    }
}

pub fn save_checkpoint(adapters: &LoraAdapterSet, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let metadata = serde_json::to_value(meta).expect("metadata serializes");
    write_container(&adapters.named_tensors(), &metadata, path)
}

pub fn load_checkpoint(path: &Path) -> Result<(LoraAdapterSet, CheckpointMeta)> {
    let c = read_container(path)?;
    let meta: CheckpointMeta = serde_json::from_value(c.metadata.clone())
        .map_err(|e| Error::MalformedHeader(format!("adapter metadata: {e}")))?;
    if meta.kind != ADAPTER_KIND {
        return Err(Error::MalformedHeader(format!("{} is not an adapter checkpoint", path.display())));
    }
    let d = meta.model_config.d_model;
    let load = |layer: usize, target: Target| -> Result<LoraAdapter> {
        let a = c.get(&tensor_name(layer, target, 'A'))?;
        let b = c.get(&tensor_name(layer, target, 'B'))?;
        if a.shape() != [meta.r, d] || b.shape() != [d, meta.r] {
            return Err(Error::shape("adapter checkpoint", a.shape(), b.shape()));
        }
        LoraAdapter::from_parts(a.clone(), b.clone(), meta.alpha, meta.dropout_p)
    };
    let layers = (0..meta.model_config.n_layers)
        .map(|i| {
            Ok(LayerAdapters {
                q: load(i, Target::Query)?,
                v: load(i, Target::Value)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((LoraAdapterSet { layers }, meta))
}
