//! End-to-end DeepEXE forward pass and implicit-differentiation backward
//! pass for a single graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::executor::agent::{argmax, successor_mask};
use crate::executor::{gumbel_noise, program_state, relaxed_sample, AgentConfig, CellWeights, JointStep, StepCache};
use crate::graph::{renormalize, CfgGraph, NormalizedAdjacency};
use crate::nn::encoder::{encode, encode_backward, EncoderCache, EncoderParams, PoolMode, TokenBatch};
use crate::nn::ops::{layer_norm_row, layer_norm_row_backward, LayerNormCache};
use crate::nn::params::{glorot, Gradients, ParamId, ParamStore};
use crate::nn::{Activation, Tensor};
use crate::solver::{anderson, project_wellposed, SolverConfig, SolverResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub pool: PoolMode,
    pub activation: Activation,
    pub agent: AgentConfig,
    pub solver: SolverConfig,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 64,
            hidden: 64,
            pool: PoolMode::Avg,
            activation: Activation::Tanh,
            agent: AgentConfig::default(),
            solver: SolverConfig::default(),
            dropout: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Dropout active, fresh Gumbel noise from the per-graph stream.
    Train,
    /// No dropout, zero Gumbel noise.
    Eval,
}

/// A graph with its model inputs precomputed.
#[derive(Debug, Clone)]
pub struct PreparedGraph {
    pub id: String,
    pub tokens: TokenBatch,
    pub adjacency: NormalizedAdjacency,
    pub exits: Vec<usize>,
    pub label: Option<u8>,
}

impl PreparedGraph {
    pub fn new(g: &CfgGraph) -> Self {
        Self {
            id: g.id.clone(),
            tokens: TokenBatch::from_sequences(&g.nodes),
            adjacency: renormalize(&g.adjacency),
            exits: g.exits.clone(),
            label: g.label,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.nodes()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nodes() == 0
    }

    pub fn pf_eigenvalue(&self) -> f64 {
        self.adjacency.pf_eigenvalue
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModelIds {
    pub encoder: EncoderParams,
    pub w_s: ParamId,
    pub w: ParamId,
    pub omega: ParamId,
    pub cell_bias: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub head: ParamId,
}

/// All trainable state of the model.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub ids: ModelIds,
}

/// Pooling head: `G = LayerNorm(mean_i X_i)`, `logit = W_p·G`.
#[derive(Debug, Clone)]
pub struct HeadCache {
    n: usize,
    ln: LayerNormCache,
    g: Vec<f64>,
}

/// Forward intermediates kept for the backward pass: the encoder
/// activations and a single evaluation of the joint step at `X*`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    encoder: EncoderCache,
    dropout: Option<Vec<f64>>,
    pub u: Tensor,
    pub noise: Vec<f64>,
    pub mask: Option<Vec<bool>>,
    pub step: StepCache,
    head: HeadCache,
    pub logit: f64,
    pub solver: SolverResult,
}

impl ForwardCache {
    /// Equilibrium node states `X*`.
    pub fn x_star(&self) -> &Tensor {
        &self.step.out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardStats {
    pub adjoint_iterations: usize,
    pub adjoint_converged: bool,
    /// Floats held by the backward pass: the forward cache plus the peak
    /// adjoint-solver workspace.
    pub retained_floats: usize,
}

/// Deterministic 64-bit mixing of a base seed with a path of counters.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut x = base ^ 0x9E37_79B9_7F4A_7C15;
    for &p in path {
        x ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(x << 6).wrapping_add(x >> 2);
        // splitmix64 finaliser
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

pub fn head_forward(x: &Tensor, gain: &[f64], bias: &[f64], head: &[f64]) -> (f64, HeadCache) {
    let n = x.rows();
    let mean: Vec<f64> = x.sum_rows().into_iter().map(|v| v / n as f64).collect();
    let (g, ln) = layer_norm_row(&mean, gain, bias);
    let logit = g.iter().zip(head).map(|(a, b)| a * b).sum();
    (logit, HeadCache { n, ln, g })
}

/// Returns `dl/dX` and accumulates head and layer-norm gradients.
pub fn head_backward(
    cache: &HeadCache,
    dlogit: f64,
    gain: &[f64],
    head: &[f64],
    d_gain: &mut [f64],
    d_bias: &mut [f64],
    d_head: &mut [f64],
) -> Tensor {
    for (d, g) in d_head.iter_mut().zip(&cache.g) {
        *d += dlogit * g;
    }
    let dg: Vec<f64> = head.iter().map(|w| dlogit * w).collect();
    let dmean = layer_norm_row_backward(&cache.ln, gain, &dg, d_gain, d_bias);
    let h = dmean.len();
    let mut dx = Tensor::zeros(&[cache.n, h]);
    for i in 0..cache.n {
        for (o, d) in dx.row_mut(i).iter_mut().zip(&dmean) {
            *o = d / cache.n as f64;
        }
    }
    dx
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(seed);
        let h = config.hidden;
        let encoder = EncoderParams::register(&mut store, config.vocab_size, config.embed_dim, h, &mut rng);
        let w_s = store.add("cell.w_s", glorot(&mut rng, h, 1));
        let w = store.add("cell.w", glorot(&mut rng, h, h));
        let omega = store.add("cell.omega", glorot(&mut rng, h, h));
        let cell_bias = store.add("cell.bias", Tensor::zeros(&[h]));
        let ln_gain = store.add("ln.gain", Tensor::filled(&[h], 1.0));
        let ln_bias = store.add("ln.bias", Tensor::zeros(&[h]));
        let head = store.add("head", glorot(&mut rng, 1, h).reshape(&[h]).expect("shape"));
        let ids = ModelIds { encoder, w_s, w, omega, cell_bias, ln_gain, ln_bias, head };
        Self { config, store, ids }
    }

    /// Projects `W` onto `‖W‖∞ ≤ κ/λ_pf`.
    pub fn project(&mut self, lambda_pf: f64) {
        let w = project_wellposed(self.store.get(self.ids.w), lambda_pf, self.config.solver.kappa);
        *self.store.get_mut(self.ids.w) = w;
    }

    pub fn cell_weights(&self) -> CellWeights<'_> {
        CellWeights {
            w_s: self.store.get(self.ids.w_s),
            w: self.store.get(self.ids.w),
            omega: self.store.get(self.ids.omega),
            bias: self.store.get(self.ids.cell_bias),
        }
    }

    /// The joint update for `graph` with frozen `noise`.
    pub fn joint_step<'a>(
        &'a self,
        graph: &'a PreparedGraph,
        u: &'a Tensor,
        noise: &'a [f64],
        mask: Option<&'a [bool]>,
    ) -> JointStep<'a> {
        JointStep {
            a_hat: &graph.adjacency.matrix,
            u,
            noise,
            mask,
            agent: self.config.agent,
            phi: self.config.activation,
            weights: self.cell_weights(),
        }
    }

    /// Block embeddings `U` (before dropout) and the encoder cache.
    pub fn encode(&self, graph: &PreparedGraph) -> Result<(Tensor, EncoderCache)> {
        encode(&self.store, &self.ids.encoder, &graph.tokens, self.config.pool)
    }

    /// Dropout mask (already scaled by `1/(1−p)`) and Gumbel noise for one
    /// forward pass, drawn from the stream seeded by `seed`.
    pub fn draw_randomness(&self, n: usize, mode: Mode, seed: u64) -> (Option<Vec<f64>>, Vec<f64>) {
        match mode {
            Mode::Eval => (None, vec![0.0; n]),
            Mode::Train => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let noise = gumbel_noise(&mut rng, n);
                let p = self.config.dropout;
                let dropout = (p > 0.0).then(|| {
                    let keep = 1.0 / (1.0 - p);
                    (0..n * self.config.hidden)
                        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                        .collect()
                });
                (dropout, noise)
            }
        }
    }

    /// Successor mask around the node chosen at `X⁰ = U`, if enabled.
    pub fn initial_mask(&self, graph: &PreparedGraph, u: &Tensor, noise: &[f64]) -> Option<Vec<bool>> {
        self.config.agent.successor_mask.then(|| {
            let s = program_state(u, self.store.get(self.ids.w_s));
            let z = relaxed_sample(&s, noise, self.config.agent.tau, None);
            successor_mask(&graph.adjacency.matrix, argmax(&z))
        })
    }

    pub fn forward(&self, graph: &PreparedGraph, mode: Mode, seed: u64) -> Result<(f64, ForwardCache)> {
        self.forward_with(graph, mode, seed, None, &self.config.solver)
    }

    /// Forward pass from an explicit initial iterate and solver settings.
    pub fn forward_with(
        &self,
        graph: &PreparedGraph,
        mode: Mode,
        seed: u64,
        x0: Option<&Tensor>,
        solver: &SolverConfig,
    ) -> Result<(f64, ForwardCache)> {
        let (u_raw, encoder) = self.encode(graph)?;
        let (dropout, noise) = self.draw_randomness(graph.len(), mode, seed);
        let u = match &dropout {
            Some(m) => Tensor::from_vec(u_raw.shape(), u_raw.data().iter().zip(m).map(|(a, b)| a * b).collect())?,
            None => u_raw,
        };
        let mask = self.initial_mask(graph, &u, &noise);
        let step = self.joint_step(graph, &u, &noise, mask.as_deref());
        let start = x0.unwrap_or(&u);
        let result = anderson(|x| step.apply(x), start, solver)?;
        let step_cache = step.forward(&result.x_star)?;
        let (logit, head) = head_forward(
            &step_cache.out,
            self.store.get(self.ids.ln_gain).data(),
            self.store.get(self.ids.ln_bias).data(),
            self.store.get(self.ids.head).data(),
        );
        if !logit.is_finite() {
            return Err(Error::NanDetected("logit".into()));
        }
        Ok((logit, ForwardCache { encoder, dropout, u, noise, mask, step: step_cache, head, logit, solver: result }))
    }

    /// Implicit backward pass: solves the adjoint fixed point
    /// `v = ∂l/∂X* + v·∂F/∂X` at the equilibrium, then pulls `v` back to
    /// every parameter. Nothing from the forward iterations other than
    /// `X*` is used.
    pub fn backward(&self, graph: &PreparedGraph, cache: &ForwardCache, dlogit: f64) -> Result<(Gradients, BackwardStats)> {
        let mut grads = self.store.zeros_like();
        let ids = self.ids;
        let (mut dgain, mut dbias, mut dhead) = {
            let h = self.config.hidden;
            (vec![0.0; h], vec![0.0; h], vec![0.0; h])
        };
        let dx_star = head_backward(
            &cache.head,
            dlogit,
            self.store.get(ids.ln_gain).data(),
            self.store.get(ids.head).data(),
            &mut dgain,
            &mut dbias,
            &mut dhead,
        );
        grads.get_mut(ids.ln_gain).data_mut().copy_from_slice(&dgain);
        grads.get_mut(ids.ln_bias).data_mut().copy_from_slice(&dbias);
        grads.get_mut(ids.head).data_mut().copy_from_slice(&dhead);

        let step = self.joint_step(graph, &cache.u, &cache.noise, cache.mask.as_deref());
        let adjoint = anderson(
            |v| {
                let mut next = step.vjp_x(&cache.step, v);
                next.add_assign(&dx_star);
                Ok(next)
            },
            &dx_star,
            &self.config.solver,
        )
        .map_err(|e| match e {
            Error::Divergence { iteration, residual } => Error::AdjointDivergence { iteration, residual },
            other => other,
        })?;
        let v = adjoint.x_star.clone();
        let vjp = step.vjp(&cache.step, &v);
        grads.get_mut(ids.w_s).add_assign(&vjp.dw_s);
        grads.get_mut(ids.w).add_assign(&vjp.dw);
        grads.get_mut(ids.omega).add_assign(&vjp.domega);
        grads.get_mut(ids.cell_bias).add_assign(&vjp.dbias);

        let mut du = vjp.du;
        if let Some(m) = &cache.dropout {
            for (d, k) in du.data_mut().iter_mut().zip(m) {
                *d *= k;
            }
        }
        encode_backward(&self.store, &ids.encoder, &cache.encoder, &du, &mut grads);

        if !grads.is_finite() {
            return Err(Error::NanDetected("gradients".into()));
        }
        let workspace = 2 * adjoint.peak_history * v.len();
        let retained = cache.encoder.retained_floats()
            + cache.step.retained_floats()
            + cache.u.len()
            + cache.noise.len()
            + cache.dropout.as_ref().map_or(0, Vec::len)
            + workspace;
        Ok((
            grads,
            BackwardStats {
                adjoint_iterations: adjoint.iterations,
                adjoint_converged: adjoint.converged,
                retained_floats: retained,
            },
        ))
    }
}
