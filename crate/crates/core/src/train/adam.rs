use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamParams {
    pub fn with_lr(lr: f32) -> Self {
        AdamParams {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates of one tensor.
#[derive(Debug, Clone)]
pub struct AdamSlot {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamSlot {
    pub fn zeros(numel: usize) -> Self {
        AdamSlot {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
        }
    }
}

/// Moments for exactly the trainable tensors, in a fixed order, plus the
/// shared step count.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: u64,
    pub slots: Vec<AdamSlot>,
}

impl OptimizerState {
    pub fn for_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Self {
        OptimizerState {
            step: 0,
            slots: tensors.into_iter().map(|t| AdamSlot::zeros(t.numel())).collect(),
        }
    }
}

/// One bias-corrected Adam update at step `t` (1-based).
pub fn adam_step(param: &Tensor, grad: &Tensor, slot: &mut AdamSlot, t: u64, hp: &AdamParams) -> Result<Tensor> {
    if param.shape() != grad.shape() || slot.m.len() != param.numel() {
        return Err(Error::shape("adam_step", param.shape(), grad.shape()));
    }
    let bc1 = (1.0 - (hp.beta1 as f64).powi(t as i32)) as f32;
    let bc2 = (1.0 - (hp.beta2 as f64).powi(t as i32)) as f32;
    let mut out = param.to_vec();
    for (i, (p, &g)) in out.iter_mut().zip(grad.data()).enumerate() {
        let m = hp.beta1 * slot.m[i] + (1.0 - hp.beta1) * g;
        let v = hp.beta2 * slot.v[i] + (1.0 - hp.beta2) * g * g;
        slot.m[i] = m;
        slot.v[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        *p -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Tensor::new(param.shape(), out)
}
