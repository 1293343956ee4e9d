//! Low-rank adapters for the query and value projections.
//!
//! An adapter augments a frozen weight `W0 ∈ R^{m×n}` with a trainable pair
//! `A ∈ R^{r×n}`, `B ∈ R^{m×r}`:
//!
//! ```text
//! out = W0·x + b0 + (alpha/r)·B·A·drop(x)  =  (W0 + (alpha/r)·B·A)·x + b0   (eval)
//! ```
//!
//! `B` starts at zero and `A` from a normal draw, so a fresh adapter is an
//! exact no-op. Dropout touches only the adapter input, never the frozen
//! path. At `alpha == r` the scale is exactly 1.
//!
//! The functions here use the `[m×n]` (output-major) convention with
//! activations as rows, `x: [T×n] → [T×m]`. Model weights are stored
//! input-major (`[n×m]`); [`merge_input_major`] handles that layout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{shard, DeviceMesh, ShardSpec};
use crate::model::{ModelConfig, ShardPlan};
use crate::tensor::{ops, Tensor};

/// Standard deviation of the normal draw for `A` unless configured otherwise.
pub const DEFAULT_A_STD: f32 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    a: Tensor,
    b: Tensor,
    alpha: f32,
    dropout_p: f32,
}

impl LoraAdapter {
    /// Builds an adapter from existing factors, validating their shapes.
    pub fn from_parts(a: Tensor, b: Tensor, alpha: f32, dropout_p: f32) -> Result<Self> {
        let (r, _) = a.dims2("lora A")?;
        let (_, rb) = b.dims2("lora B")?;
        if r == 0 || rb != r {
            return Err(Error::shape("lora", a.shape(), b.shape()));
        }
        check_dropout(dropout_p)?;
        Ok(LoraAdapter {
            a,
            b,
            alpha,
            dropout_p,
        })
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    pub fn dropout_p(&self) -> f32 {
        self.dropout_p
    }

    pub fn scale(&self) -> f32 {
        self.alpha / self.rank() as f32
    }

    pub fn parameter_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// Same hyper-parameters, new factors.
    pub fn with_factors(&self, a: Tensor, b: Tensor) -> Result<Self> {
        Self::from_parts(a, b, self.alpha, self.dropout_p)
    }

    /// `(alpha/r)·B·A`, shape `[m×n]`.
    pub fn delta_weight(&self) -> Result<Tensor> {
        Ok(ops::scale(&ops::matmul(&self.b, &self.a)?, self.scale()))
    }
}

fn check_dropout(p: f32) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidConfig(format!("dropout probability {p} is outside [0, 1)")));
    }
    Ok(())
}

/// Fresh adapter: `B = 0`, `A ~ Normal(0, 0.02²)` drawn from `seed`.
pub fn init_adapter(m: usize, n: usize, r: usize, alpha: f32, dropout_p: f32, seed: u64) -> Result<LoraAdapter> {
    init_adapter_with_std(m, n, r, alpha, dropout_p, DEFAULT_A_STD, seed)
}

pub fn init_adapter_with_std(
    m: usize,
    n: usize,
    r: usize,
    alpha: f32,
    dropout_p: f32,
    a_std: f32,
    seed: u64,
) -> Result<LoraAdapter> {
    if m == 0 || n == 0 || r == 0 {
        return Err(Error::InvalidConfig(format!(
            "adapter dimensions must be positive, got m={m} n={n} r={r}"
        )));
    }
    if r > m.min(n) / 2 {
        log::warn!("LoRA rank {r} is large relative to a {m}x{n} weight");
    }
    let normal = Normal::new(0.0f32, a_std)
        .map_err(|e| Error::InvalidConfig(format!("lora_a_std {a_std}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::from_fn(&[r, n], |_| normal.sample(&mut rng));
    let b = Tensor::zeros(&[m, r]);
    LoraAdapter::from_parts(a, b, alpha, dropout_p)
}

/// Inverted-dropout mask: each entry is `1/(1-p)` with probability `1-p`,
/// else 0.
pub fn dropout_mask(shape: &[usize], p: f32, rng: &mut impl Rng) -> Tensor {
    let keep = 1.0 / (1.0 - p);
    Tensor::from_fn(shape, |_| if rng.random::<f32>() < p { 0.0 } else { keep })
}

/// `x·W0ᵀ + (alpha/r)·drop(x)·Aᵀ·Bᵀ` for rows `x: [T×n]` and `w0: [m×n]`.
pub fn apply(adapter: &LoraAdapter, w0: &Tensor, x: &Tensor, mode: Mode, rng: &mut impl Rng) -> Result<Tensor> {
    let (m, n) = w0.dims2("lora apply")?;
    if m != adapter.out_features() || n != adapter.in_features() {
        return Err(Error::shape("lora apply", w0.shape(), &[adapter.out_features(), adapter.in_features()]));
    }
    let (_, xn) = x.dims2("lora apply")?;
    if xn != n {
        return Err(Error::shape("lora apply", x.shape(), w0.shape()));
    }
    let base = ops::matmul(x, &ops::transpose(w0)?)?;
    let dropped = match mode {
        Mode::Train if adapter.dropout_p > 0.0 => ops::mul(x, &dropout_mask(x.shape(), adapter.dropout_p, rng))?,
        _ => x.clone(),
    };
    let low = ops::matmul(&dropped, &ops::transpose(&adapter.a)?)?;
    let branch = ops::scale(&ops::matmul(&low, &ops::transpose(&adapter.b)?)?, adapter.scale());
    ops::add(&base, &branch)
}

/// `W0 + (alpha/r)·B·A` with `b0` passed through. Inputs are not modified.
pub fn merge(w0: &Tensor, b0: Option<&Tensor>, adapter: &LoraAdapter) -> Result<(Tensor, Option<Tensor>)> {
    let delta = adapter.delta_weight()?;
    if w0.shape() != delta.shape() {
        return Err(Error::shape("lora merge", w0.shape(), delta.shape()));
    }
    if let Some(b) = b0 {
        if b.shape() != [delta.shape()[0]] {
            return Err(Error::shape("lora merge bias", b.shape(), &[delta.shape()[0]]));
        }
    }
    Ok((ops::add(w0, &delta)?, b0.cloned()))
}

/// Merge for a weight stored input-major, `w: [n×m]` (so `y = x·w`).
pub fn merge_input_major(w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    let delta = ops::transpose(&adapter.delta_weight()?)?;
    if w.shape() != delta.shape() {
        return Err(Error::shape("lora merge", w.shape(), delta.shape()));
    }
    ops::add(w, &delta)
}

/// Adapter hyper-parameters shared by every adapted projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraSettings {
    pub r: usize,
    pub alpha: f32,
    pub dropout_p: f32,
    pub a_std: f32,
}

impl Default for LoraSettings {
    fn default() -> Self {
        LoraSettings {
            r: 16,
            alpha: 16.0,
            dropout_p: 0.05,
            a_std: DEFAULT_A_STD,
        }
    }
}

/// Which projection an adapter sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Query,
    Value,
}

impl Target {
    pub fn tag(self) -> &'static str {
        match self {
            Target::Query => "q",
            Target::Value => "v",
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerAdapters {
    pub q: LoraAdapter,
    pub v: LoraAdapter,
}

impl LayerAdapters {
    pub fn get(&self, target: Target) -> &LoraAdapter {
        match target {
            Target::Query => &self.q,
            Target::Value => &self.v,
        }
    }
}

/// One query and one value adapter per decoder layer.
#[derive(Debug, Clone)]
pub struct LoraAdapterSet {
    pub layers: Vec<LayerAdapters>,
}

/// Tensor name of an adapter factor inside a checkpoint.
pub fn tensor_name(layer: usize, target: Target, factor: char) -> String {
    format!("layer.{layer}.{}.lora_{factor}", target.tag())
}

fn adapter_seed(seed: u64, layer: usize, target: Target) -> u64 {
    crate::rng::derive(seed, &[0x4c6f5241, layer as u64, target as u64])
}

impl LoraAdapterSet {
    pub fn init(config: &ModelConfig, settings: &LoraSettings, seed: u64) -> Result<Self> {
        let d = config.d_model;
        let make = |layer, target| {
            init_adapter_with_std(
                d,
                d,
                settings.r,
                settings.alpha,
                settings.dropout_p,
                settings.a_std,
                adapter_seed(seed, layer, target),
            )
        };
        let layers = (0..config.n_layers)
            .map(|i| {
                Ok(LayerAdapters {
                    q: make(i, Target::Query)?,
                    v: make(i, Target::Value)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(LoraAdapterSet { layers })
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.q.parameter_count() + l.v.parameter_count()).sum()
    }

    /// Factors in checkpoint order: per layer q.A, q.B, v.A, v.B.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(self.layers.len() * 4);
        for (i, l) in self.layers.iter().enumerate() {
            for target in [Target::Query, Target::Value] {
                let ad = l.get(target);
                out.push((tensor_name(i, target, 'A'), ad.a()));
                out.push((tensor_name(i, target, 'B'), ad.b()));
            }
        }
        out
    }

    pub fn rank(&self) -> Option<usize> {
        self.layers.first().map(|l| l.q.rank())
    }
}

/// Closed-form trainable parameter count: `Σ_layers r·(m+n)` over the
/// query and value projections, all `d_model × d_model`.
pub fn closed_form_parameter_count(config: &ModelConfig, r: usize) -> usize {
    config.n_layers * 2 * r * (config.d_model + config.d_model)
}

/// Per-device adapters: `B` split along its output axis in step with the
/// column-parallel base weight, `A` replicated.
pub fn shard_adapters(set: &LoraAdapterSet, plan: &ShardPlan, mesh: &DeviceMesh) -> Result<Vec<LoraAdapterSet>> {
    let n = mesh.device_count();
    let mut per_device: Vec<Vec<LayerAdapters>> = vec![Vec::with_capacity(set.layers.len()); n];
    for (i, layer) in set.layers.iter().enumerate() {
        let mut split = Vec::with_capacity(2);
        for target in [Target::Query, Target::Value] {
            let base = match target {
                Target::Query => format!("layer.{i}.wq"),
                Target::Value => format!("layer.{i}.wv"),
            };
            if plan.spec(&base) != Some(ShardSpec::Partitioned(1)) {
                return Err(Error::InvalidConfig(format!("{base} is not column-parallel")));
            }
            let ad = layer.get(target);
            let a = shard(ad.a(), ShardSpec::Replicated, mesh)?.into_shards();
            let b = shard(ad.b(), ShardSpec::Partitioned(0), mesh)?.into_shards();
            split.push(
                a.into_iter()
                    .zip(b)
                    .map(|(a, b)| ad.with_factors(a, b))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let v = split.pop().unwrap();
        let q = split.pop().unwrap();
        for (d, (q, v)) in q.into_iter().zip(v).enumerate() {
            per_device[d].push(LayerAdapters { q, v });
        }
    }
    Ok(per_device.into_iter().map(|layers| LoraAdapterSet { layers }).collect())
}

/// Reassembles full adapters from per-device shards (B concatenated in
/// device order, A taken from device 0).
pub fn gather_adapters(per_device: &[LoraAdapterSet]) -> Result<LoraAdapterSet> {
    let first = per_device.first().ok_or_else(|| Error::InvalidConfig("no devices".into()))?;
    let layers = (0..first.layers.len())
        .map(|i| {
            let join = |target: Target| {
                let bs: Vec<&Tensor> = per_device.iter().map(|s| s.layers[i].get(target).b()).collect();
                let ad = first.layers[i].get(target);
                ad.with_factors(ad.a().clone(), ops::concat(&bs, 0)?)
            };
            Ok(LayerAdapters {
                q: join(Target::Query)?,
                v: join(Target::Value)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LoraAdapterSet { layers })
}
