//! Program state, Gumbel-softmax branching agent and adjacency gating.

use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::nn::ops::{sigmoid, softmax, softmax_backward};
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentMode {
    /// One-hot forward value, gradient through the relaxed sample.
    Hard,
    #[default]
    Soft,
}

/// Which side of `Â` the agent scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatingMode {
    /// `Ã = Â·diag(a)`: flow only into selected nodes.
    #[default]
    Column,
    /// `Ã = diag(a)·Â`: flow only out of selected nodes.
    Row,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub mode: AgentMode,
    pub tau: f64,
    #[serde(default)]
    pub successor_mask: bool,
    pub max_steps: usize,
    #[serde(default)]
    pub gating: GatingMode,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self { mode: AgentMode::Soft, tau: 1.0, successor_mask: false, max_steps: 50, gating: GatingMode::Column }
    }
}

/// `s = σ(X·W_s)`, one scalar per node.
pub fn program_state(x: &Tensor, w_s: &Tensor) -> Vec<f64> {
    let w = w_s.data();
    (0..x.rows()).map(|i| sigmoid(x.row(i).iter().zip(w).map(|(a, b)| a * b).sum())).collect()
}

/// I.i.d. standard Gumbel draws.
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let g = Gumbel::new(0.0, 1.0).expect("valid Gumbel parameters");
    (0..n).map(|_| g.sample(rng)).collect()
}

/// `z = softmax((log s + g) / τ)` over the unmasked nodes.
pub fn relaxed_sample(s: &[f64], noise: &[f64], tau: f64, mask: Option<&[bool]>) -> Vec<f64> {
    let logits: Vec<f64> = s.iter().zip(noise).map(|(si, gi)| (si.ln() + gi) / tau).collect();
    softmax(&logits, mask)
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.total_cmp(b).then(j.cmp(i)))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

pub fn one_hot(n: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

/// A single agent decision.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSample {
    /// Relaxed sample, sums to one.
    pub z: Vec<f64>,
    /// Applied gate: one-hot in hard mode, `z` in soft mode.
    pub a: Vec<f64>,
    pub selected: usize,
}

impl AgentSample {
    pub fn from_relaxed(z: Vec<f64>, mode: AgentMode) -> Self {
        let selected = argmax(&z);
        let a = match mode {
            AgentMode::Hard => one_hot(z.len(), selected),
            AgentMode::Soft => z.clone(),
        };
        Self { z, a, selected }
    }
}

/// Draws fresh Gumbel noise and samples the agent from program state `s`.
pub fn gumbel_sample<R: Rng + ?Sized>(s: &[f64], tau: f64, rng: &mut R, hard: bool) -> AgentSample {
    let noise = gumbel_noise(rng, s.len());
    let z = relaxed_sample(s, &noise, tau, None);
    AgentSample::from_relaxed(z, if hard { AgentMode::Hard } else { AgentMode::Soft })
}

/// Scales the columns (or rows) of `Â` by the agent gate `a ∈ [0,1]ⁿ`.
pub fn gate_adjacency(a_hat: &Tensor, a: &[f64], gating: GatingMode) -> Tensor {
    let n = a_hat.rows();
    let mut out = a_hat.clone();
    for i in 0..n {
        for j in 0..n {
            let g = match gating {
                GatingMode::Column => a[j],
                GatingMode::Row => a[i],
            };
            out.set(i, j, a_hat.at(i, j) * g);
        }
    }
    out
}

/// Pulls a gate cotangent back to the pre-sigmoid program-state logits
/// `X·W_s`. The hard gate reuses this path unchanged (straight-through), so
/// both modes share one backward rule for identical noise.
pub fn agent_vjp(z: &[f64], s: &[f64], tau: f64, d_gate: &[f64]) -> Vec<f64> {
    let dlogit = softmax_backward(z, d_gate);
    // d/dq of ln σ(q) is 1 − σ(q).
    dlogit.iter().zip(s).map(|(dl, si)| dl * (1.0 - si) / tau).collect()
}

/// Successors of `node` in `Â` (its self loop included).
pub fn successor_mask(a_hat: &Tensor, node: usize) -> Vec<bool> {
    a_hat.row(node).iter().map(|&v| v > 0.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn program_state_examples() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(program_state(&x, &Tensor::zeros(&[2, 1])), vec![0.5, 0.5]);
        let s = program_state(&x, &Tensor::from_vec(&[2, 1], vec![1.0, 0.0]).unwrap());
        assert!((s[0] - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert_eq!(s[1], 0.5);
        let big = Tensor::from_rows(&[vec![1e3, 0.0]]).unwrap();
        assert!((program_state(&big, &Tensor::from_vec(&[2, 1], vec![1.0, 0.0]).unwrap())[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hard_sample_is_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let smp = gumbel_sample(&[0.2, 0.3, 0.5], 0.5, &mut rng, true);
            assert_eq!(smp.a.iter().sum::<f64>(), 1.0);
            assert_eq!(smp.a.iter().filter(|&&v| v == 1.0).count(), 1);
            assert!((smp.z.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_temperature_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let smp = gumbel_sample(&[0.1, 0.6, 0.9, 0.3], 1e6, &mut rng, false);
        assert!(smp.z.iter().all(|v| (v - 0.25).abs() < 1e-3));
    }

    #[test]
    fn gating_examples() {
        let a_hat = Tensor::from_rows(&[vec![0.5, 0.7, 0.0], vec![0.0, 0.5, 0.7], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(gate_adjacency(&a_hat, &[1.0; 3], GatingMode::Column), a_hat);
        let g = gate_adjacency(&a_hat, &[0.0, 0.0, 1.0], GatingMode::Column);
        for i in 0..3 {
            assert_eq!(g.at(i, 0), 0.0);
            assert_eq!(g.at(i, 1), 0.0);
            assert_eq!(g.at(i, 2), a_hat.at(i, 2));
        }
        let r = gate_adjacency(&a_hat, &[0.0, 1.0, 0.0], GatingMode::Row);
        assert_eq!(r.row(1), a_hat.row(1));
        assert!(r.row(0).iter().all(|&v| v == 0.0));
    }
}
