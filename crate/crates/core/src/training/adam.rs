use serde::{Deserialize, Serialize};

use crate::nn::{Gradients, ParamStore, Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn round_to(&mut self, precision: Precision) {
        for t in self.m.iter_mut().chain(&mut self.v) {
            t.round_to(precision);
        }
    }
}

/// Bias-corrected Adam update of every parameter.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, cfg: &AdamConfig, state: &mut AdamState) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (p, param) in store.values_mut().iter_mut().enumerate() {
        let g = grads.0[p].data();
        let m = state.m[p].data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = state.v[p].data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let (m, v) = (state.m[p].data(), state.v[p].data());
        for ((x, mi), vi) in param.data_mut().iter_mut().zip(m).zip(v) {
            *x -= cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
        }
    }
}
