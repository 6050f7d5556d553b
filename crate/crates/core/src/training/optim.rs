//! AdamW with decoupled weight decay, and the warm-restart cosine schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::params::ExpertTensors;
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moments per parameter, plus the number of updates taken.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: ExpertTensors<Tensor<F>>,
    pub v: ExpertTensors<Tensor<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn zeros(params: &ExpertTensors<Tensor<F>>) -> Self {
        let zero = |_: &str, t: &Tensor<F>| Tensor::zeros(t.shape());
        Self { step: 0, m: params.map(zero), v: params.map(zero) }
    }
}

/// One AdamW update. `grads` holds `None` for frozen tensors, which are left
/// untouched (no decay either). Non-finite gradients abort before any
/// tensor is modified.
pub fn adamw_step<F: Real>(
    params: &mut ExpertTensors<Tensor<F>>,
    grads: &ExpertTensors<Option<Tensor<F>>>,
    state: &mut AdamState<F>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), Error> {
    let grads = grads.entries();
    for (name, g) in &grads {
        if let Some(g) = g {
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in tensor {name}")));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (F::from_f64(cfg.beta1), F::from_f64(cfg.beta2));
    let decay = F::from_f64(1.0 - lr * cfg.weight_decay);
    let (lr_f, eps) = (F::from_f64(lr), F::from_f64(cfg.eps));
    let (bc1, bc2) = (F::from_f64(bc1), F::from_f64(bc2));

    let ps = params.leaves_mut();
    let ms = state.m.leaves_mut();
    let vs = state.v.leaves_mut();
    for ((((name, g), p), m), v) in grads.iter().zip(ps).zip(ms).zip(vs) {
        let Some(g) = g else { continue };
        if g.shape() != p.shape() {
            return Err(Error::Numeric(format!("gradient shape {:?} for {name} of shape {:?}", g.shape(), p.shape())));
        }
        let iter = p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data());
        for (((p, m), v), &g) in iter {
            *m = b1 * *m + (F::one() - b1) * g;
            *v = b2 * *v + (F::one() - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p * decay - lr_f * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Cosine annealing with warm restarts every `period` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr0: f64,
    pub eta_min: f64,
    pub period: usize,
}

impl Schedule {
    pub fn new(lr0: f64, eta_min: f64, period: usize) -> Result<Self, Error> {
        if !(lr0 > 0.0) || period == 0 || !(eta_min >= 0.0) || eta_min > lr0 {
            return Err(Error::Config(format!("invalid schedule: lr0 {lr0}, eta_min {eta_min}, period {period}")));
        }
        Ok(Self { lr0, eta_min, period })
    }

    /// Half of an epoch, rounded up.
    pub fn half_epoch_period(steps_per_epoch: usize) -> usize {
        steps_per_epoch.div_ceil(2).max(1)
    }
}

pub fn lr_schedule(step: u64, schedule: &Schedule) -> f64 {
    let t = (step % schedule.period as u64) as f64;
    let phase = std::f64::consts::PI * t / schedule.period as f64;
    schedule.eta_min + (schedule.lr0 - schedule.eta_min) * (1.0 + phase.cos()) / 2.0
}
