//! Independent f64 reference implementations used as test oracles.
//!
//! Everything here is written as plain loops over `Vec<f64>` without the
//! tape, the mesh or the crate's kernels.

#![allow(dead_code)]

use tplora_core::lora::{LoraAdapterSet, LoraSettings, Target};
use tplora_core::mesh::Worker;
use tplora_core::model::{bind_adapters, forward_local, init_params, ModelConfig, ModelParams};
use tplora_core::{Tape, Tensor};

/// Row-major f64 matrix.
#[derive(Debug, Clone)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (rows, cols) = match t.shape() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            s => panic!("oracle expects rank ≤ 2, got {s:?}"),
        };
        Mat {
            rows,
            cols,
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut s = 0.0;
                for p in 0..self.cols {
                    s += self.at(i, p) * other.at(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.at(i, j));
            }
        }
        out
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn max_abs_diff_f32(&self, t: &Tensor) -> f64 {
        assert_eq!(self.data.len(), t.numel());
        self.data
            .iter()
            .zip(t.data())
            .map(|(a, &b)| (a - b as f64).abs())
            .fold(0.0, f64::max)
    }
}

fn rms_norm(x: &Mat, gain: &Mat, eps: f64) -> Mat {
    let mut out = x.clone();
    for r in 0..x.rows {
        let ms: f64 = (0..x.cols).map(|c| x.at(r, c).powi(2)).sum::<f64>() / x.cols as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        for c in 0..x.cols {
            out.set(r, c, x.at(r, c) * inv * gain.data[c]);
        }
    }
    out
}

fn rope(x: &Mat, head_dim: usize, theta: f64) -> Mat {
    let mut out = x.clone();
    for pos in 0..x.rows {
        for head in 0..x.cols / head_dim {
            for i in 0..head_dim / 2 {
                let freq = theta.powf(-2.0 * i as f64 / head_dim as f64);
                let (s, c) = (pos as f64 * freq).sin_cos();
                let (a, b) = (head * head_dim + 2 * i, head * head_dim + 2 * i + 1);
                let (xa, xb) = (x.at(pos, a), x.at(pos, b));
                out.set(pos, a, xa * c - xb * s);
                out.set(pos, b, xa * s + xb * c);
            }
        }
    }
    out
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// Logits `[T×V]` of the full (unsharded) model in eval mode.
pub fn forward(config: &ModelConfig, params: &ModelParams, adapters: Option<&LoraAdapterSet>, tokens: &[u32]) -> Mat {
    let d = config.d_model;
    let hd = config.head_dim();
    let t_len = tokens.len();
    let eps = config.rmsnorm_eps as f64;
    let theta = config.rope_theta as f64;
    let emb = Mat::from_tensor(&params.token_embedding);
    let mut h = Mat::zeros(t_len, d);
    for (t, &tok) in tokens.iter().enumerate() {
        for c in 0..d {
            h.set(t, c, emb.at(tok as usize, c));
        }
    }
    for (li, layer) in params.layers.iter().enumerate() {
        let a = rms_norm(&h, &Mat::from_tensor(&layer.attn_norm_gain), eps);
        let mut wq = Mat::from_tensor(&layer.wq);
        let mut wv = Mat::from_tensor(&layer.wv);
        if let Some(set) = adapters {
            // y = x·W + s·x·Aᵀ·Bᵀ, so the input-major effective weight is W + s·(B·A)ᵀ.
            let fold = |w: &mut Mat, ad: &tplora_core::lora::LoraAdapter| {
                let ba = Mat::from_tensor(ad.b()).matmul(&Mat::from_tensor(ad.a()));
                *w = w.add(&ba.transpose().scale(ad.alpha() as f64 / ad.rank() as f64));
            };
            fold(&mut wq, &set.layers[li].q);
            fold(&mut wv, &set.layers[li].v);
        }
        let q = rope(&a.matmul(&wq), hd, theta);
        let k = rope(&a.matmul(&Mat::from_tensor(&layer.wk)), hd, theta);
        let v = a.matmul(&wv);
        let mut attn = Mat::zeros(t_len, d);
        for head in 0..config.n_heads {
            let off = head * hd;
            for i in 0..t_len {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| (0..hd).map(|c| q.at(i, off + c) * k.at(j, off + c)).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for c in 0..hd {
                    let val: f64 = (0..=i).map(|j| exps[j] / z * v.at(j, off + c)).sum();
                    attn.set(i, off + c, val);
                }
            }
        }
        h = h.add(&attn.matmul(&Mat::from_tensor(&layer.wo)));
        let m = rms_norm(&h, &Mat::from_tensor(&layer.mlp_norm_gain), eps);
        let g = m.matmul(&Mat::from_tensor(&layer.w_gate));
        let u = m.matmul(&Mat::from_tensor(&layer.w_up));
        let mut act = g.clone();
        for idx in 0..act.data.len() {
            act.data[idx] = silu(g.data[idx]) * u.data[idx];
        }
        h = h.add(&act.matmul(&Mat::from_tensor(&layer.w_down)));
    }
    let f = rms_norm(&h, &Mat::from_tensor(&params.final_norm_gain), eps);
    f.matmul(&Mat::from_tensor(&params.lm_head))
}

/// Mean over masked positions of `-log softmax(logits)[t, target_t]`.
pub fn cross_entropy(logits: &Mat, targets: &[u32], mask: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for t in 0..logits.rows {
        if !mask[t] {
            continue;
        }
        let row = &logits.data[t * logits.cols..(t + 1) * logits.cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[targets[t] as usize];
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

pub fn toy_config() -> ModelConfig {
    ModelConfig::new(259, 16, 4, 2, 32, 64)
}

/// A pseudo-random tensor with entries in `[-scale, scale)`.
pub fn random_tensor(shape: &[usize], scale: f32, seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

pub fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
}

const EPS: f32 = 1e-3;

fn gradient_setup() -> (ModelConfig, ModelParams, LoraAdapterSet, Vec<u32>, Vec<u32>, Vec<bool>) {
    let config = ModelConfig::new(259, 16, 4, 1, 32, 32);
    let params = init_params(&config, 11).unwrap();
    let settings = LoraSettings {
        r: 4,
        alpha: 8.0,
        dropout_p: 0.0,
        a_std: 0.1,
    };
    let mut set = LoraAdapterSet::init(&config, &settings, 11).unwrap();
    for l in &mut set.layers {
        l.q = l.q.with_factors(l.q.a().clone(), random_tensor(l.q.b().shape(), 0.2, 1)).unwrap();
        l.v = l.v.with_factors(l.v.a().clone(), random_tensor(l.v.b().shape(), 0.2, 2)).unwrap();
    }
    let seq = random_tokens(9, config.vocab_size, 3);
    let inputs = seq[..8].to_vec();
    let targets = seq[1..].to_vec();
    let mask = vec![true; 8];
    (config, params, set, inputs, targets, mask)
}

fn replace_factor(set: &LoraAdapterSet, target: Target, factor: char, t: Tensor) -> LoraAdapterSet {
    let mut out = set.clone();
    let l = &mut out.layers[0];
    let ad = match target {
        Target::Query => &mut l.q,
        Target::Value => &mut l.v,
    };
    *ad = if factor == 'A' {
        ad.with_factors(t, ad.b().clone())
    } else {
        ad.with_factors(ad.a().clone(), t)
    }
    .unwrap();
    out
}

/// Worst relative error between tape gradients of every LoRA factor and
/// central differences of the f64 oracle loss, on a 1-layer model.
pub fn lora_gradient_check() -> f64 {
    let (config, params, set, inputs, targets, mask) = gradient_setup();
    let mut tape = Tape::new();
    let vars = bind_adapters(&mut tape, &set, true);
    let logits = forward_local(&mut tape, &config, &params, Some((&set, &vars)), &inputs, &Worker::local(), None).unwrap();
    let loss = tape.cross_entropy_next_token(logits, &targets, &mask).unwrap();
    let grads = tape.backward(loss.var).unwrap();

    let oracle = |s: &LoraAdapterSet| cross_entropy(&forward(&config, &params, Some(s), &inputs), &targets, &mask);
    let mut worst = 0.0f64;
    for (k, (target, factor)) in [(Target::Query, 'A'), (Target::Query, 'B'), (Target::Value, 'A'), (Target::Value, 'B')]
        .into_iter()
        .enumerate()
    {
        let ad = set.layers[0].get(target);
        let base = if factor == 'A' { ad.a() } else { ad.b() };
        let analytic = grads.get(vars.layers[0][k]).unwrap();
        for i in 0..base.numel() {
            let mut plus = base.to_vec();
            let mut minus = base.to_vec();
            plus[i] += EPS;
            minus[i] -= EPS;
            let h = plus[i] as f64 - minus[i] as f64;
            let lp = oracle(&replace_factor(&set, target, factor, Tensor::new(base.shape(), plus).unwrap()));
            let lm = oracle(&replace_factor(&set, target, factor, Tensor::new(base.shape(), minus).unwrap()));
            let numeric = (lp - lm) / h;
            let a = analytic.data()[i] as f64;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max(rel);
        }
    }
    worst
}
