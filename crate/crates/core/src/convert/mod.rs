//! On-disk tensor containers, base-model files and the adapter merge.

mod container;
mod merge;

use std::collections::HashMap;
use std::path::Path;

use serde_json::json;

pub use container::{read_container, write_container, Container, TensorEntry, FORMAT_VERSION, MAGIC, PREAMBLE_LEN};
pub use merge::{check_compatible, merge_command, merge_params};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

pub const BASE_KIND: &str = "base_model";

/// Writes a full base model with its config in the metadata.
pub fn write_base(params: &ModelParams, config: &ModelConfig, path: &Path) -> Result<()> {
    let metadata = json!({ "kind": BASE_KIND, "model_config": config });
    write_container(&params.named_tensors(), &metadata, path)
}

pub fn read_base(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let c = read_container(path)?;
    if c.metadata.get("kind").and_then(|k| k.as_str()) != Some(BASE_KIND) {
        return Err(Error::MalformedHeader(format!("{} is not a base model container", path.display())));
    }
    let config: ModelConfig = serde_json::from_value(c.metadata["model_config"].clone())
        .map_err(|e| Error::MalformedHeader(format!("model_config: {e}")))?;
    config.validate()?;
    let tensors: HashMap<String, _> = c.tensors.into_iter().collect();
    let params = ModelParams::from_named(&config, &tensors)?;
    Ok((config, params))
}
