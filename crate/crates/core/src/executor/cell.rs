//! The implicit GNN cell and the joint state-transition map whose fixed
//! point defines the equilibrium node states.

use super::agent::{agent_vjp, gate_adjacency, program_state, relaxed_sample, AgentConfig, AgentMode, AgentSample, GatingMode};
use crate::error::Result;
use crate::nn::{Activation, Tensor};

/// `X' = φ(Ãᵀ·X·W + U·Ω + b)`: one message-passing step along edge
/// direction plus the injected block semantics.
pub fn deq_cell(
    x: &Tensor,
    u: &Tensor,
    w: &Tensor,
    omega: &Tensor,
    bias: &Tensor,
    a_tilde: &Tensor,
    phi: Activation,
) -> Result<Tensor> {
    let pre = cell_preactivation(&a_tilde.matmul_tn(x), u, w, omega, bias);
    let out = pre.map(|v| phi.apply(v));
    out.ensure_finite("deq_cell")?;
    Ok(out)
}

fn cell_preactivation(m: &Tensor, u: &Tensor, w: &Tensor, omega: &Tensor, bias: &Tensor) -> Tensor {
    let mut pre = m.matmul(w);
    pre.add_assign(&u.matmul(omega));
    let b = bias.data();
    for i in 0..pre.rows() {
        for (p, bb) in pre.row_mut(i).iter_mut().zip(b) {
            *p += bb;
        }
    }
    pre
}

/// Trainable tensors of the cell and agent.
#[derive(Debug, Clone, Copy)]
pub struct CellWeights<'a> {
    pub w_s: &'a Tensor,
    pub w: &'a Tensor,
    pub omega: &'a Tensor,
    pub bias: &'a Tensor,
}

/// Everything the joint update needs besides the iterate `X`. The Gumbel
/// noise is fixed for the lifetime of this value, which makes the update a
/// deterministic map.
#[derive(Debug, Clone)]
pub struct JointStep<'a> {
    pub a_hat: &'a Tensor,
    pub u: &'a Tensor,
    pub noise: &'a [f64],
    pub mask: Option<&'a [bool]>,
    pub agent: AgentConfig,
    pub phi: Activation,
    pub weights: CellWeights<'a>,
}

/// Intermediates of one evaluation of [`JointStep`].
#[derive(Debug, Clone)]
pub struct StepCache {
    pub x: Tensor,
    pub s: Vec<f64>,
    pub sample: AgentSample,
    pub a_tilde: Tensor,
    /// `Ãᵀ·X`.
    pub aggregated: Tensor,
    pub pre: Tensor,
    pub out: Tensor,
}

impl StepCache {
    pub fn retained_floats(&self) -> usize {
        self.x.len()
            + self.s.len()
            + 2 * self.sample.z.len()
            + self.a_tilde.len()
            + self.aggregated.len()
            + self.pre.len()
            + self.out.len()
    }
}

/// Cotangents produced by [`JointStep::vjp`].
#[derive(Debug, Clone)]
pub struct StepVjp {
    pub dx: Tensor,
    pub du: Tensor,
    pub dw_s: Tensor,
    pub dw: Tensor,
    pub domega: Tensor,
    pub dbias: Tensor,
}

impl<'a> JointStep<'a> {
    /// program state → agent → gated adjacency → cell.
    pub fn forward(&self, x: &Tensor) -> Result<StepCache> {
        let s = program_state(x, self.weights.w_s);
        let z = relaxed_sample(&s, self.noise, self.agent.tau, self.mask);
        let sample = AgentSample::from_relaxed(z, self.agent.mode);
        let a_tilde = gate_adjacency(self.a_hat, &sample.a, self.agent.gating);
        let aggregated = a_tilde.matmul_tn(x);
        let w = &self.weights;
        let pre = cell_preactivation(&aggregated, self.u, w.w, w.omega, w.bias);
        let out = pre.map(|v| self.phi.apply(v));
        out.ensure_finite("joint step")?;
        Ok(StepCache { x: x.clone(), s, sample, a_tilde, aggregated, pre, out })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.out)
    }

    /// Vector-Jacobian product of the step at `cache.x` with cotangent
    /// `dout`. In hard mode the gate gradient is routed through the relaxed
    /// sample (straight-through).
    pub fn vjp(&self, cache: &StepCache, dout: &Tensor) -> StepVjp {
        self.vjp_inner(cache, dout, true)
    }

    /// Only the `X` component of [`Self::vjp`].
    pub fn vjp_x(&self, cache: &StepCache, dout: &Tensor) -> Tensor {
        self.vjp_inner(cache, dout, false).dx
    }

    fn vjp_inner(&self, cache: &StepCache, dout: &Tensor, with_params: bool) -> StepVjp {
        let w = &self.weights;
        let n = cache.x.rows();
        let dpre = Tensor::from_vec(
            cache.pre.shape(),
            dout.data()
                .iter()
                .zip(cache.pre.data().iter().zip(cache.out.data()))
                .map(|(d, (&p, &o))| d * self.phi.derivative(p, o))
                .collect(),
        )
        .expect("shape");

        let d_agg = dpre.matmul_nt(w.w);
        let mut dx = cache.a_tilde.matmul(&d_agg);

        // dÃ = X·d_aggᵀ; only entries on the support of Â matter.
        let mut da = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                let ah = self.a_hat.at(i, j);
                if ah == 0.0 {
                    continue;
                }
                let d_at: f64 = cache.x.row(i).iter().zip(d_agg.row(j)).map(|(a, b)| a * b).sum();
                match self.agent.gating {
                    GatingMode::Column => da[j] += ah * d_at,
                    GatingMode::Row => da[i] += ah * d_at,
                }
            }
        }
        let dq = agent_vjp(&cache.sample.z, &cache.s, self.agent.tau, &da);
        let ws = w.w_s.data();
        for (i, &d) in dq.iter().enumerate() {
            if d != 0.0 {
                for (o, wk) in dx.row_mut(i).iter_mut().zip(ws) {
                    *o += d * wk;
                }
            }
        }

        if !with_params {
            let empty = Tensor::zeros(&[0]);
            return StepVjp {
                dx,
                du: empty.clone(),
                dw_s: empty.clone(),
                dw: empty.clone(),
                domega: empty.clone(),
                dbias: empty,
            };
        }

        let dq_t = Tensor::from_vec(&[n, 1], dq).expect("shape");
        StepVjp {
            dx,
            du: dpre.matmul_nt(w.omega),
            dw_s: cache.x.matmul_tn(&dq_t).reshape(w.w_s.shape()).expect("shape"),
            dw: cache.aggregated.matmul_tn(&dpre),
            domega: self.u.matmul_tn(&dpre),
            dbias: Tensor::from_vec(w.bias.shape(), dpre.sum_rows()).expect("shape"),
        }
    }
}

/// Whether the hard agent's choice lands on an exit.
pub fn selects_exit(sample: &AgentSample, mode: AgentMode, exits: &[usize]) -> bool {
    mode == AgentMode::Hard && exits.contains(&sample.selected)
}
