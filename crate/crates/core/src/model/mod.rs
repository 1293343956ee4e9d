//! The miniature Llama-style decoder: configuration, parameters, the
//! tensor-parallel layout and the forward pass.

mod config;
mod forward;
mod generate;
mod params;

pub use config::ModelConfig;
pub use forward::{bind_adapters, check_tokens, forward, forward_local, forward_sharded, AdapterVars, DropoutKey};
pub use generate::{generate, GenerateOptions};
pub use params::{gather_params, init_params, shard_params, tensor_names, tensor_shape, LayerParams, ModelParams, ShardPlan, INIT_STD};
