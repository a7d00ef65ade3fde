//! Adam with bias correction and the warmup + cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::scalar::Scalar;

use super::{ParamSet, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.data.len()]).collect();
        AdamState { config, step: 0, first_moment: zeros.clone(), second_moment: zeros }
    }
}

/// One Adam update of every tensor in `params`.
///
/// Fails without touching anything if a gradient is non-finite or shaped wrong.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<(), TensorError> {
    if grads.len() != params.len() || state.first_moment.len() != params.len() {
        return Err(TensorError::Invalid {
            op: "adam_step",
            msg: format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.first_moment.len()),
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.data.len() != g.len() {
            return Err(TensorError::Shape { op: "adam_step", shapes: vec![p.shape.clone(), vec![g.len()]] });
        }
        if !g.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite(format!("gradient of {}", p.name)));
        }
    }
    state.step += 1;
    let cfg = state.config;
    let t = state.step as i32;
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let one = T::one();
    let c1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t));
    let lr = T::from_f64_lossy(lr);
    let eps = T::from_f64_lossy(cfg.eps);
    for (i, p) in params.tensors.iter_mut().enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for (j, w) in p.data.iter_mut().enumerate() {
            let gj = grads[i][j];
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warmup from `initial` to `peak`, then cosine decay to `final_lr`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub peak: f64,
    pub final_lr: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { initial: 3e-4, peak: 3e-3, final_lr: 3e-6 }
    }
}

impl LrSchedule {
    pub fn at(&self, step: usize, total_steps: usize, warmup_steps: usize) -> f64 {
        let step = step.min(total_steps);
        let warmup = warmup_steps.min(total_steps);
        if step < warmup {
            return self.initial + (self.peak - self.initial) * step as f64 / warmup as f64;
        }
        let span = total_steps - warmup;
        if span == 0 {
            return self.peak;
        }
        let progress = (step - warmup) as f64 / span as f64;
        self.final_lr + 0.5 * (self.peak - self.final_lr) * (1.0 + (PI * progress).cos())
    }
}

/// The default schedule: 3e-4 → 3e-3 over the warmup, cosine down to 3e-6 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize) -> f64 {
    LrSchedule::default().at(step, total_steps, warmup_steps)
}
