use serde::{Deserialize, Serialize};

use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 1e-7 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamWState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One bias-corrected AdamW update with decoupled weight decay at
/// learning rate `lr`. Indices in `frozen` are left untouched.
pub fn adamw_step<F: Scalar>(params: &mut [F], grads: &[f64], state: &mut AdamWState, lr: f64, cfg: &AdamWConfig, frozen: &[usize]) {
    assert_eq!(params.len(), grads.len(), "parameter and gradient lengths differ");
    assert_eq!(params.len(), state.m.len(), "optimizer state does not match the parameters");
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (k, p) in params.iter_mut().enumerate() {
        let g = grads[k];
        state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g;
        state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g;
        if frozen.contains(&k) {
            continue;
        }
        let mhat = state.m[k] / bc1;
        let vhat = state.v[k] / bc2;
        *p = F::of(p.f64() * decay - lr * mhat / (vhat.sqrt() + cfg.eps));
    }
}

/// Linear warmup from 0 to 1 over the first `warmup_frac * total` steps,
/// then half-cosine decay to 0 at `total`.
pub fn cosine_schedule(step: usize, total: usize, warmup_frac: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let s = step.min(total) as f64;
    let warm = warmup_frac * total as f64;
    if s < warm {
        return s / warm;
    }
    let span = total as f64 - warm;
    if span <= 0.0 {
        return 1.0;
    }
    0.5 * (1.0 + (std::f64::consts::PI * (s - warm) / span).cos())
}
