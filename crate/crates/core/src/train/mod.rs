//! LoRA fine-tuning: configuration, Adam, checkpoints and the training loop.

mod adam;
mod checkpoint;
mod config;
mod trainer;

pub use adam::{adam_step, AdamParams, AdamSlot, OptimizerState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, ADAPTER_KIND};
pub use config::TrainConfig;
pub use trainer::{
    batch_loss, checkpoint_every, effective_max_len, evaluate, train_lora, train_with_base, BatchLoss, StepRecord,
    TrainOutcome, TrainReport, Trainer,
};
