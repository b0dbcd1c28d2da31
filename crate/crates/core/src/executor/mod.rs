//! Neural control-flow executor: program state, branching agent, gated
//! adjacency and the implicit cell, plus an explicit stepping loop with
//! the three termination rules and exportable traces.

pub mod agent;
pub mod cell;

use serde::{Deserialize, Serialize};

pub use agent::{
    agent_vjp, gate_adjacency, gumbel_noise, gumbel_sample, program_state, relaxed_sample, AgentConfig,
    AgentMode, AgentSample, GatingMode,
};
pub use cell::{deq_cell, CellWeights, JointStep, StepCache, StepVjp};

use crate::error::Result;
use crate::nn::Tensor;
use crate::solver::relative_residual;

/// State after one executor step.
#[derive(Debug, Clone)]
pub struct ExecutionState {
    pub x: Tensor,
    pub s: Vec<f64>,
    pub z: Vec<f64>,
    pub a: Vec<f64>,
    pub a_gated: Tensor,
    pub selected: usize,
    pub step: usize,
    /// `‖X^{t+1} − X^t‖_F / (‖X^t‖_F + 1e-12)`.
    pub residual: f64,
    pub hard: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    ExitReached,
    Equilibrium,
    MaxSteps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Continue,
    Done(StopReason),
}

/// Exit reached (hard agent on any exit node) takes precedence over
/// equilibrium, which takes precedence over the step budget.
pub fn check_termination(state: &ExecutionState, exits: &[usize], tol: f64, max_steps: usize) -> Termination {
    if state.hard && exits.contains(&state.selected) {
        Termination::Done(StopReason::ExitReached)
    } else if state.residual < tol {
        Termination::Done(StopReason::Equilibrium)
    } else if state.step >= max_steps {
        Termination::Done(StopReason::MaxSteps)
    } else {
        Termination::Continue
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub selected: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub graph_id: String,
    pub steps: Vec<TraceStep>,
    pub stop: StopReason,
}

/// Steps the joint update from `X⁰ = U` one transition at a time until a
/// termination rule fires. Returns the final state and its trace.
pub fn run_executor(
    step: &JointStep<'_>,
    graph_id: &str,
    exits: &[usize],
    tol: f64,
) -> Result<(ExecutionState, ExecutionTrace)> {
    let mut x = step.u.clone();
    let mut steps = Vec::new();
    let mut t = 0;
    loop {
        let cache = step.forward(&x)?;
        t += 1;
        let state = ExecutionState {
            residual: relative_residual(&x, &cache.out),
            x: cache.out,
            s: cache.s,
            z: cache.sample.z,
            a: cache.sample.a,
            a_gated: cache.a_tilde,
            selected: cache.sample.selected,
            step: t,
            hard: step.agent.mode == AgentMode::Hard,
        };
        steps.push(TraceStep { selected: state.selected, residual: state.residual });
        if let Termination::Done(stop) = check_termination(&state, exits, tol, step.agent.max_steps) {
            let trace = ExecutionTrace { graph_id: graph_id.to_string(), steps, stop };
            return Ok((state, trace));
        }
        x = state.x;
    }
}
