//! The decoder forward pass.
//!
//! One schedule serves both execution modes. [`forward_local`] runs on a
//! [`Worker`] holding its shard of the parameters; on [`Worker::local`] the
//! collectives are identities, so the single-device path and the 1-device
//! mesh are the same code and produce the same bits.
//!
//! Per block:
//!
//! ```text
//! a    = rmsnorm(h) ⊙ g_attn
//! q,k,v = a·W_q, a·W_k, a·W_v            (column-parallel: local heads)
//! q   += (alpha/r)·drop(a)·A_qᵀ·B_qᵀ     (same for v; B split with W)
//! o    = concat_h softmax(mask(rope(q_h)·rope(k_h)ᵀ/√hd))·v_h
//! h   += all_reduce(o·W_o)               (row-parallel)
//! m    = rmsnorm(h) ⊙ g_mlp
//! h   += all_reduce((silu(m·W_gate) ⊙ m·W_up)·W_down)
//! ```
//!
//! The embedding and output head are split on the d_model axis: the lookup
//! is local followed by an all-gather of the row slices, and the head
//! multiplies this device's d_model slice of the final activations and
//! all-reduces the partial logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lora::{dropout_mask, LoraAdapter, LoraAdapterSet, Mode};
use crate::mesh::parallel::{copy_to_parallel, reduce_from_parallel};
use crate::mesh::{DeviceMesh, Worker};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{Tape, Tensor, Var};

/// Identifies one dropout draw. Masks depend only on this key, the layer and
/// the projection, so they are the same on every device and for every mesh
/// size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub step: u64,
    pub row: u64,
}

/// Tape handles of the adapter factors, per layer `[q.A, q.B, v.A, v.B]`.
#[derive(Debug, Clone)]
pub struct AdapterVars {
    pub layers: Vec<[Var; 4]>,
}

/// Records the adapter factors on `tape`, as parameters when `trainable`.
pub fn bind_adapters(tape: &mut Tape, adapters: &LoraAdapterSet, trainable: bool) -> AdapterVars {
    let layers = adapters
        .layers
        .iter()
        .map(|l| {
            [
                tape.leaf(l.q.a().clone(), trainable),
                tape.leaf(l.q.b().clone(), trainable),
                tape.leaf(l.v.a().clone(), trainable),
                tape.leaf(l.v.b().clone(), trainable),
            ]
        })
        .collect();
    AdapterVars { layers }
}

/// Checks the token sequence against the config.
pub fn check_tokens(config: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::InvalidShape {
            op: "forward",
            reason: "empty token sequence".into(),
        });
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::IndexOutOfRange {
            what: "sequence length",
            index: tokens.len(),
            limit: config.max_seq_len,
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::IndexOutOfRange {
            what: "token id",
            index: t as usize,
            limit: config.vocab_size,
        });
    }
    Ok(())
}

fn embed(params: &ModelParams, tokens: &[u32], worker: &Worker) -> Result<Tensor> {
    let (_, cols) = params.token_embedding.dims2("embedding")?;
    let table = params.token_embedding.data();
    let mut rows = Vec::with_capacity(tokens.len() * cols);
    for &t in tokens {
        let start = t as usize * cols;
        rows.extend_from_slice(&table[start..start + cols]);
    }
    let local = Tensor::new(&[tokens.len(), cols], rows)?;
    worker.all_gather(&local, 1)
}

struct Ctx<'a> {
    config: &'a ModelConfig,
    worker: &'a Worker,
    dropout: Option<DropoutKey>,
}

impl Ctx<'_> {
    /// `(alpha/r)·drop(x)·Aᵀ·B_localᵀ`, where `x` is the replicated input.
    #[allow(clippy::too_many_arguments)]
    fn lora_delta(
        &self,
        tape: &mut Tape,
        x: Var,
        adapter: &LoraAdapter,
        a: Var,
        b: Var,
        layer: usize,
        proj: u64,
    ) -> Result<Var> {
        let xd = match self.dropout {
            Some(key) if adapter.dropout_p() > 0.0 => {
                let seed = crate::rng::derive(key.seed, &[key.step, key.row, layer as u64, proj]);
                let mask = dropout_mask(tape.value(x)?.shape(), adapter.dropout_p(), &mut ChaCha8Rng::seed_from_u64(seed));
                let mask = tape.constant(mask);
                tape.mul(x, mask)?
            }
            _ => x,
        };
        let at = tape.transpose(a)?;
        let u = tape.matmul(xd, at)?;
        let u = copy_to_parallel(tape, self.worker, u)?;
        let bt = tape.transpose(b)?;
        let low = tape.matmul(u, bt)?;
        tape.scale(low, adapter.scale())
    }

    fn attention(&self, tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
        let hd = self.config.head_dim();
        let q = tape.rope(q, hd, self.config.rope_theta)?;
        let k = tape.rope(k, hd, self.config.rope_theta)?;
        let local_heads = tape.value(q)?.shape()[1] / hd;
        let inv_sqrt = 1.0 / (hd as f32).sqrt();
        let mut heads = Vec::with_capacity(local_heads);
        for h in 0..local_heads {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let kh = tape.slice_cols(k, h * hd, hd)?;
            let vh = tape.slice_cols(v, h * hd, hd)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, inv_sqrt)?;
            let scores = tape.causal_mask(scores)?;
            let probs = tape.softmax(scores)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        tape.concat_cols(&heads)
    }
}

/// Records one sequence's forward pass on `tape` and returns its logits
/// `[T×vocab]`, identical on every device.
///
/// `params` and `adapters` are this worker's shards. Dropout is applied only
/// when `dropout` is given.
pub fn forward_local(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &ModelParams,
    adapters: Option<(&LoraAdapterSet, &AdapterVars)>,
    tokens: &[u32],
    worker: &Worker,
    dropout: Option<DropoutKey>,
) -> Result<Var> {
    check_tokens(config, tokens)?;
    let ctx = Ctx {
        config,
        worker,
        dropout,
    };
    let eps = config.rmsnorm_eps;
    let mut h = tape.constant(embed(params, tokens, worker)?);

    for (i, layer) in params.layers.iter().enumerate() {
        let gain = tape.constant(layer.attn_norm_gain.clone());
        let a = tape.rms_norm(h, gain, eps)?;
        let ap = copy_to_parallel(tape, worker, a)?;
        let wq = tape.constant(layer.wq.clone());
        let wk = tape.constant(layer.wk.clone());
        let wv = tape.constant(layer.wv.clone());
        let mut q = tape.matmul(ap, wq)?;
        let k = tape.matmul(ap, wk)?;
        let mut v = tape.matmul(ap, wv)?;
        if let Some((set, vars)) = adapters {
            let [qa, qb, va, vb] = vars.layers[i];
            let ad = &set.layers[i];
            let dq = ctx.lora_delta(tape, a, &ad.q, qa, qb, i, 0)?;
            q = tape.add(q, dq)?;
            let dv = ctx.lora_delta(tape, a, &ad.v, va, vb, i, 1)?;
            v = tape.add(v, dv)?;
        }
        let attn = ctx.attention(tape, q, k, v)?;
        let wo = tape.constant(layer.wo.clone());
        let o = tape.matmul(attn, wo)?;
        let o = reduce_from_parallel(tape, worker, o)?;
        h = tape.add(h, o)?;

        let gain = tape.constant(layer.mlp_norm_gain.clone());
        let m = tape.rms_norm(h, gain, eps)?;
        let mp = copy_to_parallel(tape, worker, m)?;
        let w_gate = tape.constant(layer.w_gate.clone());
        let w_up = tape.constant(layer.w_up.clone());
        let w_down = tape.constant(layer.w_down.clone());
        let g = tape.matmul(mp, w_gate)?;
        let g = tape.silu(g)?;
        let up = tape.matmul(mp, w_up)?;
        let act = tape.mul(g, up)?;
        let down = tape.matmul(act, w_down)?;
        let down = reduce_from_parallel(tape, worker, down)?;
        h = tape.add(h, down)?;
    }

    let gain = tape.constant(params.final_norm_gain.clone());
    let f = tape.rms_norm(h, gain, eps)?;
    let fp = copy_to_parallel(tape, worker, f)?;
    let slice = params.lm_head.shape()[0];
    let fs = tape.slice_cols(fp, worker.device() * slice, slice)?;
    let head = tape.constant(params.lm_head.clone());
    let partial = tape.matmul(fs, head)?;
    reduce_from_parallel(tape, worker, partial)
}

fn eval_dropout(mode: Mode, dropout: Option<DropoutKey>) -> Option<DropoutKey> {
    match mode {
        Mode::Train => dropout,
        Mode::Eval => None,
    }
}

/// Single-device forward. In train mode, `dropout` selects the mask draw
/// (none if absent).
pub fn forward(
    config: &ModelConfig,
    params: &ModelParams,
    adapters: Option<&LoraAdapterSet>,
    tokens: &[u32],
    mode: Mode,
    dropout: Option<DropoutKey>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = adapters.map(|a| bind_adapters(&mut tape, a, false));
    let bound = adapters.zip(vars.as_ref());
    let logits = forward_local(
        &mut tape,
        config,
        params,
        bound,
        tokens,
        &Worker::local(),
        eval_dropout(mode, dropout),
    )?;
    Ok(tape.value(logits)?.clone())
}

/// Tensor-parallel forward over `mesh`, given per-device parameter (and
/// adapter) shards. Returns the logits as seen by each device.
pub fn forward_sharded(
    config: &ModelConfig,
    params: &[ModelParams],
    adapters: Option<&[LoraAdapterSet]>,
    tokens: &[u32],
    mesh: &DeviceMesh,
    mode: Mode,
    dropout: Option<DropoutKey>,
) -> Result<Vec<Tensor>> {
    let n = mesh.device_count();
    config.validate_for_devices(n)?;
    check_tokens(config, tokens)?;
    if params.len() != n || adapters.is_some_and(|a| a.len() != n) {
        return Err(Error::InvalidConfig(format!("expected {n} per-device shards")));
    }
    let dropout = eval_dropout(mode, dropout);
    mesh.run(|worker| {
        let d = worker.device();
        let mut tape = Tape::new();
        let set = adapters.map(|a| &a[d]);
        let vars = set.map(|a| bind_adapters(&mut tape, a, false));
        let logits = forward_local(&mut tape, config, &params[d], set.zip(vars.as_ref()), tokens, worker, dropout)?;
        Ok(tape.value(logits)?.clone())
    })
}
