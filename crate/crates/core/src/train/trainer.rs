//! The LoRA-only training loop.
//!
//! A coordinator builds each step's batch and drives one SPMD step on the
//! mesh. Every worker runs the sharded forward in train mode, backpropagates
//! into its adapter factors only, averages the gradient of the replicated
//! `A` factors across devices (the sharded `B` gradients are already local
//! and complete) and applies Adam to what it owns. Checkpoints and reports
//! are written by the coordinator alone.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::convert::read_base;
use crate::data::{build_batch, AlpacaDataset, AlpacaExample, TokenBatch};
use crate::error::{Error, Result};
use crate::lora::{gather_adapters, shard_adapters, LoraAdapterSet};
use crate::mesh::{DeviceMesh, LedgerEntry, Worker};
use crate::model::{
    bind_adapters, forward_local, gather_params, shard_params, AdapterVars, DropoutKey, ModelConfig, ModelParams,
    ShardPlan,
};
use crate::tensor::{ops, Tape, Var};
use crate::train::{adam_step, save_checkpoint, AdamParams, CheckpointMeta, OptimizerState, TrainConfig};

/// Mean masked next-token loss of a batch, recorded on `tape`.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub var: Var,
    /// Loss positions in the batch.
    pub count: usize,
}

/// Records the loss of every row and combines them into the mean over all
/// loss positions of the batch. `dropout` is `(seed, step)` in train mode.
pub fn batch_loss(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &ModelParams,
    adapters: Option<(&LoraAdapterSet, &AdapterVars)>,
    batch: &TokenBatch,
    worker: &Worker,
    dropout: Option<(u64, u64)>,
) -> Result<BatchLoss> {
    let total = batch.loss_positions();
    if total == 0 {
        return Err(Error::InvalidConfig("batch has no loss positions".into()));
    }
    let mut acc: Option<Var> = None;
    for b in 0..batch.rows() {
        let (inputs, targets, mask) = batch.row(b);
        let key = dropout.map(|(seed, step)| DropoutKey {
            seed,
            step,
            row: b as u64,
        });
        let logits = forward_local(tape, config, params, adapters, inputs, worker, key)?;
        let loss = tape.cross_entropy_next_token(logits, targets, mask)?;
        if loss.is_empty() {
            continue;
        }
        let weighted = tape.scale(loss.var, loss.count as f32 / total as f32)?;
        acc = Some(match acc {
            None => weighted,
            Some(prev) => tape.add(prev, weighted)?,
        });
    }
    Ok(BatchLoss {
        var: acc.expect("at least one row has loss positions"),
        count: total,
    })
}

/// The longest example `build_batch` may produce for `model`.
pub fn effective_max_len(config: &TrainConfig, model: &ModelConfig) -> usize {
    config.max_len.min(model.max_seq_len + 1)
}

/// Mean eval-mode loss over every loss position of `examples`, on one
/// device, without touching any parameter.
pub fn evaluate(
    model: &ModelConfig,
    params: &ModelParams,
    adapters: Option<&LoraAdapterSet>,
    examples: &[AlpacaExample],
    config: &TrainConfig,
) -> Result<f32> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let max_len = effective_max_len(config, model);
    let worker = Worker::local();
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for chunk in examples.chunks(config.batch_size) {
        let batch = build_batch(chunk, max_len, config.mask_prompt)?;
        let mut tape = Tape::new();
        let vars = adapters.map(|a| bind_adapters(&mut tape, a, false));
        let loss = batch_loss(&mut tape, model, params, adapters.zip(vars.as_ref()), &batch, &worker, None)?;
        sum += tape.value(loss.var)?.item()? as f64 * loss.count as f64;
        count += loss.count;
    }
    Ok((sum / count as f64) as f32)
}

struct DeviceState {
    params: ModelParams,
    adapters: LoraAdapterSet,
    opt: OptimizerState,
}

/// Loss and wall time of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f32,
    pub seconds: f64,
}

/// A training run in progress on a mesh.
pub struct Trainer {
    config: TrainConfig,
    model: ModelConfig,
    mesh: DeviceMesh,
    plan: ShardPlan,
    states: Vec<DeviceState>,
    examples: Vec<AlpacaExample>,
    max_len: usize,
    dropout_seed: u64,
    step: usize,
}

impl Trainer {
    /// Validates everything up front (config, divisibility, every example's
    /// batch) so a bad setup fails before any compute.
    pub fn new(config: &TrainConfig, model: &ModelConfig, params: &ModelParams, dataset: &AlpacaDataset) -> Result<Self> {
        config.validate()?;
        model.validate_for_devices(config.n_devices)?;
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let max_len = effective_max_len(config, model);
        if max_len < config.max_len {
            log::info!("max_len {} clamped to {max_len} by the model's max_seq_len", config.max_len);
        }
        build_batch(&dataset.examples, max_len, config.mask_prompt)?;

        let mesh = DeviceMesh::new(config.n_devices)?;
        let plan = ShardPlan::new(model);
        let adapters = LoraAdapterSet::init(model, &config.lora_settings(), crate::rng::derive(config.seed, &[1]))?;
        let local_params = shard_params(params, &plan, &mesh)?;
        let local_adapters = shard_adapters(&adapters, &plan, &mesh)?;
        let states = local_params
            .into_iter()
            .zip(local_adapters)
            .map(|(params, adapters)| {
                let opt = OptimizerState::for_tensors(adapters.named_tensors().into_iter().map(|(_, t)| t));
                DeviceState { params, adapters, opt }
            })
            .collect();
        Ok(Trainer {
            config: config.clone(),
            model: *model,
            mesh,
            plan,
            states,
            examples: dataset.examples.clone(),
            max_len,
            dropout_seed: crate::rng::derive(config.seed, &[2]),
            step: 0,
        })
    }

    pub fn mesh(&self) -> &DeviceMesh {
        &self.mesh
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Examples of step `step`, cycling through the dataset in order.
    pub fn batch_for_step(&self, step: usize) -> Result<TokenBatch> {
        let n = self.examples.len();
        let bs = self.config.batch_size;
        let rows: Vec<AlpacaExample> = (0..bs).map(|j| self.examples[(step * bs + j) % n].clone()).collect();
        build_batch(&rows, self.max_len, self.config.mask_prompt)
    }

    /// One optimizer step. The timing covers the barriered SPMD step only;
    /// batch construction happens before the clock starts.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let batch = self.batch_for_step(step)?;
        let hp = AdamParams::with_lr(self.config.learning_rate);
        let model = self.model;
        let dropout = Some((self.dropout_seed, step as u64));
        let start = Instant::now();
        let losses = self.mesh.run_spmd(&mut self.states, |worker, st| {
            let mut tape = Tape::new();
            let vars = bind_adapters(&mut tape, &st.adapters, true);
            let loss = batch_loss(&mut tape, &model, &st.params, Some((&st.adapters, &vars)), &batch, worker, dropout)?;
            let value = tape.value(loss.var)?.item()?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let grads = tape.backward(loss.var)?;
            st.opt.step += 1;
            let t = st.opt.step;
            let inv_n = 1.0 / worker.device_count() as f32;
            for (layer, ad) in st.adapters.layers.iter_mut().enumerate() {
                let [qa, qb, va, vb] = vars.layers[layer];
                for (k, (adapter, a_var, b_var)) in [(&mut ad.q, qa, qb), (&mut ad.v, va, vb)].into_iter().enumerate() {
                    let ga = grads.get(a_var).ok_or(Error::NotOnTape)?;
                    let ga = ops::scale(&worker.all_reduce_sum(ga)?, inv_n);
                    let gb = grads.get(b_var).ok_or(Error::NotOnTape)?;
                    let slot = 4 * layer + 2 * k;
                    let a = adam_step(adapter.a(), &ga, &mut st.opt.slots[slot], t, &hp)?;
                    let b = adam_step(adapter.b(), gb, &mut st.opt.slots[slot + 1], t, &hp)?;
                    *adapter = adapter.with_factors(a, b)?;
                }
            }
            Ok(value)
        })?;
        let seconds = start.elapsed().as_secs_f64();
        self.step += 1;
        Ok(StepRecord {
            step,
            loss: losses[0],
            seconds,
        })
    }

    /// Bytes of base-parameter shards held by each device.
    pub fn device_parameter_bytes(&self) -> Vec<u64> {
        self.states.iter().map(|s| s.params.bytes() as u64).collect()
    }

    /// Bytes of adapter shards held by each device.
    pub fn device_adapter_bytes(&self) -> Vec<u64> {
        self.states
            .iter()
            .map(|s| s.adapters.named_tensors().iter().map(|(_, t)| t.bytes() as u64).sum())
            .collect()
    }

    /// Full adapters reassembled from the device shards.
    pub fn adapters(&self) -> Result<LoraAdapterSet> {
        let per_device: Vec<LoraAdapterSet> = self.states.iter().map(|s| s.adapters.clone()).collect();
        gather_adapters(&per_device)
    }

    /// Each device's adapter shards.
    pub fn device_adapters(&self) -> Vec<&LoraAdapterSet> {
        self.states.iter().map(|s| &s.adapters).collect()
    }

    /// Full base parameters reassembled from the device shards.
    pub fn base_params(&self) -> Result<ModelParams> {
        let per_device: Vec<ModelParams> = self.states.iter().map(|s| s.params.clone()).collect();
        gather_params(&per_device, &self.plan)
    }

    pub fn trainable_parameter_count(&self) -> Result<usize> {
        Ok(self.adapters()?.trainable_parameter_count())
    }

    /// Tensors carrying optimizer state on one device.
    pub fn optimizer_tensor_count(&self) -> usize {
        self.states[0].opt.slots.len()
    }

    pub fn checkpoint_meta(&self) -> Result<CheckpointMeta> {
        let mut meta = CheckpointMeta::new(&self.adapters()?, &self.model)?;
        meta.train_config = Some(self.config.clone());
        meta.step = self.step;
        Ok(meta)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.adapters()?, &self.checkpoint_meta()?, path)
    }
}

/// Summary of a training run, serialized as the JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub n_devices: usize,
    pub n_steps: usize,
    pub losses: Vec<f32>,
    pub step_seconds: Vec<f64>,
    pub checkpoint_path: Option<PathBuf>,
    pub peak_memory: Vec<LedgerEntry>,
    pub trainable_parameters: usize,
    pub base_fingerprint_before: String,
    pub base_fingerprint_after: String,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f32> {
        self.losses.first().copied()
    }

    pub fn final_loss(&self) -> Option<f32> {
        self.losses.last().copied()
    }
}

/// Result of [`train_with_base`]: the report and the trained adapters.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub adapters: LoraAdapterSet,
}

/// Steps between periodic checkpoints.
pub fn checkpoint_every(n_steps: usize) -> usize {
    (n_steps / 10).max(1)
}

/// Trains adapters for an in-memory base model. `on_step` sees every step
/// as it completes. The checkpoint, if a path is given, is rewritten every
/// [`checkpoint_every`] steps and after the last one.
pub fn train_with_base(
    config: &TrainConfig,
    model: &ModelConfig,
    params: &ModelParams,
    dataset: &AlpacaDataset,
    checkpoint_path: Option<&Path>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    let before = params.fingerprint();
    let mut trainer = Trainer::new(config, model, params, dataset)?;
    let every = checkpoint_every(config.n_steps);
    let mut losses = Vec::with_capacity(config.n_steps);
    let mut step_seconds = Vec::with_capacity(config.n_steps);
    for i in 0..config.n_steps {
        let rec = trainer.step()?;
        on_step(&rec);
        losses.push(rec.loss);
        step_seconds.push(rec.seconds);
        if let Some(path) = checkpoint_path {
            if (i + 1) % every == 0 || i + 1 == config.n_steps {
                trainer.save_checkpoint(path)?;
            }
        }
    }
    let after = trainer.base_params()?.fingerprint();
    if after != before {
        return Err(Error::InvalidConfig("base weights changed during training".into()));
    }
    let adapters = trainer.adapters()?;
    let report = TrainReport {
        n_devices: config.n_devices,
        n_steps: config.n_steps,
        losses,
        step_seconds,
        checkpoint_path: checkpoint_path.map(Path::to_path_buf),
        peak_memory: trainer.mesh().ledger_report(),
        trainable_parameters: adapters.trainable_parameter_count(),
        base_fingerprint_before: before,
        base_fingerprint_after: after,
    };
    Ok(TrainOutcome { report, adapters })
}

/// Loads the base model named by `config` and trains on `dataset`.
pub fn train_lora(config: &TrainConfig, dataset: &AlpacaDataset, checkpoint_path: &Path) -> Result<TrainReport> {
    config.validate()?;
    let (model, params) = read_base(&config.base_params_path)?;
    train_with_base(config, &model, &params, dataset, Some(checkpoint_path), |rec| {
        log::info!("step {} loss {}", rec.step, rec.loss)
    })
    .map(|o| o.report)
}
