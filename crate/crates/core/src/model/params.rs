use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mesh::{shard, shard_bytes, DeviceMesh, ShardSpec};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

/// Standard deviation of the initial linear and embedding weights.
pub const INIT_STD: f32 = 0.02;

/// Weights of one decoder block. Linear weights are stored input-major
/// (`y = x·W`) and carry no bias.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub attn_norm_gain: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm_gain: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

/// The frozen base model. On a mesh, each device holds a `ModelParams`
/// whose tensors are that device's shards.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub token_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm_gain: Tensor,
    pub lm_head: Tensor,
}

const LAYER_FIELDS: [&str; 9] = [
    "attn_norm_gain",
    "wq",
    "wk",
    "wv",
    "wo",
    "mlp_norm_gain",
    "w_gate",
    "w_up",
    "w_down",
];

/// Canonical tensor names, in container order.
pub fn tensor_names(config: &ModelConfig) -> Vec<String> {
    let mut names = vec!["token_embedding".to_string()];
    for i in 0..config.n_layers {
        names.extend(LAYER_FIELDS.iter().map(|f| format!("layer.{i}.{f}")));
    }
    names.push("final_norm_gain".into());
    names.push("lm_head".into());
    names
}

/// Logical shape of a named tensor.
pub fn tensor_shape(config: &ModelConfig, name: &str) -> Option<Vec<usize>> {
    let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
    let field = match name.strip_prefix("layer.") {
        Some(rest) => {
            let (idx, field) = rest.split_once('.')?;
            if idx.parse::<usize>().ok()? >= config.n_layers {
                return None;
            }
            field
        }
        None => name,
    };
    Some(match field {
        "token_embedding" if !name.starts_with("layer.") => vec![v, d],
        "final_norm_gain" if !name.starts_with("layer.") => vec![d],
        "lm_head" if !name.starts_with("layer.") => vec![d, v],
        "attn_norm_gain" | "mlp_norm_gain" if name.starts_with("layer.") => vec![d],
        "wq" | "wk" | "wv" | "wo" if name.starts_with("layer.") => vec![d, d],
        "w_gate" | "w_up" if name.starts_with("layer.") => vec![d, f],
        "w_down" if name.starts_with("layer.") => vec![f, d],
        _ => return None,
    })
}

impl ModelParams {
    /// Tensors paired with their canonical names, in container order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("token_embedding".to_string(), &self.token_embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            let fields = [
                &l.attn_norm_gain,
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.mlp_norm_gain,
                &l.w_gate,
                &l.w_up,
                &l.w_down,
            ];
            for (name, t) in LAYER_FIELDS.iter().zip(fields) {
                out.push((format!("layer.{i}.{name}"), t));
            }
        }
        out.push(("final_norm_gain".into(), &self.final_norm_gain));
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    fn assemble(n_layers: usize, mut take: impl FnMut(&str) -> Result<Tensor>) -> Result<Self> {
        let token_embedding = take("token_embedding")?;
        let layers = (0..n_layers)
            .map(|i| {
                let mut f = |field: &str| take(&format!("layer.{i}.{field}"));
                Ok(LayerParams {
                    attn_norm_gain: f("attn_norm_gain")?,
                    wq: f("wq")?,
                    wk: f("wk")?,
                    wv: f("wv")?,
                    wo: f("wo")?,
                    mlp_norm_gain: f("mlp_norm_gain")?,
                    w_gate: f("w_gate")?,
                    w_up: f("w_up")?,
                    w_down: f("w_down")?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ModelParams {
            token_embedding,
            layers,
            final_norm_gain: take("final_norm_gain")?,
            lm_head: take("lm_head")?,
        })
    }

    /// Builds full (unsharded) parameters from named tensors, checking every
    /// shape against `config`.
    pub fn from_named(config: &ModelConfig, tensors: &HashMap<String, Tensor>) -> Result<Self> {
        Self::assemble(config.n_layers, |name| {
            let t = tensors.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
            let expected = tensor_shape(config, name).expect("canonical name");
            if t.shape() != expected.as_slice() {
                return Err(Error::shape("model tensor", t.shape(), &expected));
            }
            Ok(t.clone())
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bytes(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.bytes()).sum()
    }

    /// SHA-256 over names, shapes and raw bytes of every tensor.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Deterministic initialization: linear and embedding weights from
/// `Normal(0, 0.02²)`, norm gains 1.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |shape: &[usize]| Tensor::from_fn(shape, |_| normal.sample(&mut rng));
    ModelParams::assemble(config.n_layers, |name| {
        let shape = tensor_shape(config, name).expect("canonical name");
        Ok(if name.ends_with("norm_gain") {
            Tensor::full(&shape, 1.0)
        } else {
            draw(&shape)
        })
    })
}

/// Layout of every base parameter over a 1-D mesh.
///
/// Attention and MLP input projections are column-parallel (split on the
/// output axis, which for attention is the head axis); `wo` and `w_down` are
/// row-parallel (split on the input axis). The token embedding and the output
/// head are both split on the d_model axis, and norm gains are replicated.
#[derive(Debug, Clone)]
pub struct ShardPlan {
    entries: Vec<(String, Vec<usize>, ShardSpec)>,
}

impl ShardPlan {
    pub fn new(config: &ModelConfig) -> Self {
        let entries = tensor_names(config)
            .into_iter()
            .map(|name| {
                let shape = tensor_shape(config, &name).expect("canonical name");
                let field = name.rsplit('.').next().unwrap_or(&name);
                let spec = match field {
                    "wq" | "wk" | "wv" | "w_gate" | "w_up" => ShardSpec::Partitioned(1),
                    "wo" | "w_down" => ShardSpec::Partitioned(0),
                    "token_embedding" => ShardSpec::Partitioned(1),
                    "lm_head" => ShardSpec::Partitioned(0),
                    _ => ShardSpec::Replicated,
                };
                (name, shape, spec)
            })
            .collect();
        ShardPlan { entries }
    }

    pub fn spec(&self, name: &str) -> Option<ShardSpec> {
        self.entries.iter().find(|(n, _, _)| n == name).map(|(_, _, s)| *s)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &[usize], ShardSpec)> {
        self.entries.iter().map(|(n, s, spec)| (n.as_str(), s.as_slice(), *spec))
    }

    /// Total logical bytes of (partitioned, replicated) tensors.
    pub fn logical_bytes(&self) -> (u64, u64) {
        let mut part = 0;
        let mut repl = 0;
        for (_, shape, spec) in &self.entries {
            let b = 4 * shape.iter().product::<usize>() as u64;
            match spec {
                ShardSpec::Partitioned(_) => part += b,
                ShardSpec::Replicated => repl += b,
            }
        }
        (part, repl)
    }

    /// Bytes each device holds for the base parameters on `devices` devices.
    pub fn per_device_bytes(&self, devices: usize) -> Result<u64> {
        self.entries
            .iter()
            .map(|(_, shape, spec)| shard_bytes(shape, *spec, devices))
            .sum()
    }
}

/// Splits `params` per `plan`, returning each device's local parameters.
pub fn shard_params(params: &ModelParams, plan: &ShardPlan, mesh: &DeviceMesh) -> Result<Vec<ModelParams>> {
    let n = mesh.device_count();
    let mut per_device: Vec<HashMap<String, Tensor>> = vec![HashMap::new(); n];
    for (name, t) in params.named_tensors() {
        let spec = plan
            .spec(&name)
            .ok_or_else(|| Error::InvalidConfig(format!("no shard spec for {name}")))?;
        for (d, s) in shard(t, spec, mesh)?.into_shards().into_iter().enumerate() {
            per_device[d].insert(name.clone(), s);
        }
    }
    per_device
        .into_iter()
        .map(|mut m| {
            ModelParams::assemble(params.layers.len(), |name| {
                m.remove(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
            })
        })
        .collect()
}

/// Reassembles full parameters from per-device shards. Replicated tensors
/// must be bit-identical on every device.
pub fn gather_params(per_device: &[ModelParams], plan: &ShardPlan) -> Result<ModelParams> {
    let first = per_device.first().ok_or_else(|| Error::InvalidConfig("no devices".into()))?;
    let named: Vec<Vec<(String, &Tensor)>> = per_device.iter().map(|p| p.named_tensors()).collect();
    let mut full: HashMap<String, Tensor> = HashMap::new();
    for (i, (name, t0)) in named[0].iter().enumerate() {
        let parts: Vec<&Tensor> = named.iter().map(|n| n[i].1).collect();
        let spec = plan
            .spec(name)
            .ok_or_else(|| Error::InvalidConfig(format!("no shard spec for {name}")))?;
        let t = match spec {
            ShardSpec::Partitioned(axis) => crate::tensor::ops::concat(&parts, axis)?,
            ShardSpec::Replicated => {
                if parts.iter().any(|p| !p.bit_eq(t0)) {
                    return Err(Error::InvalidConfig(format!("replicated {name} differs across devices")));
                }
                (*t0).clone()
            }
        };
        full.insert(name.clone(), t);
    }
    ModelParams::assemble(first.layers.len(), |name| {
        full.remove(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    })
}
