use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Absolute residual norm above which an iteration is declared divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Number of `(x, f(x))` pairs kept in the Anderson history.
    pub memory: usize,
    pub max_iter: usize,
    /// Relative residual threshold `‖f(x) − x‖ / (‖x‖ + 1e-12)`.
    pub tol: f64,
    /// Ridge factor of the least-squares step, relative to the largest
    /// diagonal entry of the normal matrix.
    pub ridge: f64,
    /// Contraction constant used by the well-posedness projection.
    pub kappa: f64,
    /// Plain fixed-point iteration instead of Anderson mixing.
    #[serde(default)]
    pub naive: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { memory: 5, max_iter: 50, tol: 1e-5, ridge: 1e-8, kappa: 0.9, naive: false }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory < 1 {
            return Err(Error::Schema { context: "solver.memory".into(), message: "must be ≥ 1".into() });
        }
        if !(0.0..1.0).contains(&self.kappa) {
            return Err(Error::Schema {
                context: "solver.kappa".into(),
                message: format!("must lie in [0, 1), got {}", self.kappa),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SolverResult {
    pub x_star: Tensor,
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Iterations where the least-squares system was singular and a plain
    /// step was taken instead.
    pub fallbacks: Vec<usize>,
    /// Largest number of stored history pairs during the solve.
    pub peak_history: usize,
}

impl SolverResult {
    pub fn final_residual(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(f64::INFINITY)
    }

    /// `iter,residual` rows with a header line.
    pub fn residuals_csv(&self) -> String {
        let mut s = String::from("iter,residual\n");
        for (i, r) in self.residuals.iter().enumerate() {
            let _ = writeln!(s, "{},{:e}", i + 1, r);
        }
        s
    }
}

pub fn relative_residual(x: &Tensor, fx: &Tensor) -> f64 {
    let diff: f64 = x.data().iter().zip(fx.data()).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt();
    diff / (x.frobenius_norm() + 1e-12)
}

fn check_divergence(iteration: usize, g_norm: f64) -> Result<()> {
    if !g_norm.is_finite() || g_norm > DIVERGENCE_THRESHOLD {
        return Err(Error::Divergence { iteration, residual: g_norm });
    }
    Ok(())
}

/// `x_{t+1} = f(x_t)` until the relative residual drops below `tol` or
/// `max_iter` evaluations of `f` have been spent.
pub fn naive_iterate<F>(mut f: F, x0: &Tensor, max_iter: usize, tol: f64) -> Result<SolverResult>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let mut x = x0.clone();
    let mut residuals = Vec::new();
    for t in 0..max_iter {
        let fx = f(&x)?;
        let g_norm = fx.sub(&x).frobenius_norm();
        check_divergence(t + 1, g_norm)?;
        let res = relative_residual(&x, &fx);
        residuals.push(res);
        x = fx;
        if res < tol {
            return Ok(SolverResult { x_star: x, residuals, iterations: t + 1, converged: true, fallbacks: vec![], peak_history: 1 });
        }
    }
    Ok(SolverResult { x_star: x, residuals, iterations: max_iter, converged: false, fallbacks: vec![], peak_history: 1 })
}

/// Solves the small dense system `M y = b` by Gaussian elimination with
/// partial pivoting. `None` when a pivot vanishes.
fn solve_dense(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() < 1e-300 || !m[piv][col].is_finite() {
            return None;
        }
        m.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let factor = m[row][col] / m[col][col];
            for k in col..n {
                m[row][k] -= factor * m[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut y = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| m[row][k] * y[k]).sum();
        y[row] = (b[row] - s) / m[row][row];
    }
    y.iter().all(|v| v.is_finite()).then_some(y)
}

/// Mixing weights `α` minimising `‖Σ αᵢ gᵢ‖₂` subject to `Σ αᵢ = 1`.
/// The constraint is eliminated through `α_last = 1 − Σ_{i<last} αᵢ`,
/// leaving a ridge-regularised least-squares problem in the differences
/// `gᵢ − g_last`.
fn mixing_weights(gs: &VecDeque<Tensor>, ridge: f64) -> Option<Vec<f64>> {
    let k = gs.len();
    let last = &gs[k - 1];
    let diffs: Vec<Tensor> = gs.iter().take(k - 1).map(|g| g.sub(last)).collect();
    let dim = k - 1;
    let mut normal = vec![vec![0.0; dim]; dim];
    let mut rhs = vec![0.0; dim];
    for i in 0..dim {
        for j in i..dim {
            let v = diffs[i].dot(&diffs[j]);
            normal[i][j] = v;
            normal[j][i] = v;
        }
        rhs[i] = -diffs[i].dot(last);
    }
    let scale = (0..dim).map(|i| normal[i][i]).fold(0.0, f64::max);
    for (i, row) in normal.iter_mut().enumerate() {
        row[i] += ridge * scale;
    }
    let gamma = solve_dense(normal, rhs)?;
    let mut alpha = gamma.clone();
    alpha.push(1.0 - gamma.iter().sum::<f64>());
    Some(alpha)
}

/// Anderson-accelerated fixed-point iteration.
///
/// Keeps the last `memory` evaluations `f(xᵢ)` with residuals
/// `gᵢ = f(xᵢ) − xᵢ`, and sets `x_{t+1} = Σ αᵢ f(xᵢ)` with `α` from
/// [`mixing_weights`]. With `memory = 1` this is exactly
/// [`naive_iterate`].
pub fn anderson<F>(mut f: F, x0: &Tensor, cfg: &SolverConfig) -> Result<SolverResult>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    if cfg.naive {
        return naive_iterate(f, x0, cfg.max_iter, cfg.tol);
    }
    let m = cfg.memory.max(1);
    let mut x = x0.clone();
    let mut fs: VecDeque<Tensor> = VecDeque::with_capacity(m);
    let mut gs: VecDeque<Tensor> = VecDeque::with_capacity(m);
    let mut residuals = Vec::new();
    let mut fallbacks = Vec::new();
    for t in 0..cfg.max_iter {
        let fx = f(&x)?;
        let g = fx.sub(&x);
        check_divergence(t + 1, g.frobenius_norm())?;
        let res = relative_residual(&x, &fx);
        residuals.push(res);
        if res < cfg.tol {
            return Ok(SolverResult { x_star: fx, residuals, iterations: t + 1, converged: true, fallbacks, peak_history: fs.len().max(1) });
        }
        if fs.len() == m {
            fs.pop_front();
            gs.pop_front();
        }
        fs.push_back(fx);
        gs.push_back(g);
        x = if fs.len() == 1 {
            fs[0].clone()
        } else {
            match mixing_weights(&gs, cfg.ridge) {
                Some(alpha) => {
                    let mut next = Tensor::zeros(x.shape());
                    for (a, fi) in alpha.iter().zip(&fs) {
                        next.axpy(*a, fi);
                    }
                    next
                }
                None => {
                    fallbacks.push(t + 1);
                    fs.back().expect("nonempty").clone()
                }
            }
        };
    }
    let last = f(&x)?;
    Ok(SolverResult { x_star: last, residuals, iterations: cfg.max_iter, converged: false, fallbacks, peak_history: fs.len().max(1) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    fn cos_map(x: &Tensor) -> Result<Tensor> {
        Ok(x.map(f64::cos))
    }

    #[test]
    fn affine_naive() {
        let r = naive_iterate(|x| Ok(x.map(|v| 0.5 * v + 1.0)), &scalar(0.0), 100, 1e-8).unwrap();
        assert!(r.converged);
        assert!((r.x_star.data()[0] - 2.0).abs() < 1e-6);
        assert!(r.iterations <= 30, "{}", r.iterations);
    }

    #[test]
    fn identity_converges_immediately() {
        let x0 = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let r = naive_iterate(|x| Ok(x.clone()), &x0, 10, 1e-8).unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!(r.x_star, x0);
    }

    #[test]
    fn cos_fixed_point_naive_and_anderson() {
        // Reference from a long naive run.
        let reference = naive_iterate(cos_map, &scalar(0.0), 10_000, 1e-15).unwrap();
        let xstar = reference.x_star.data()[0];
        assert!((xstar - 0.739_085_1).abs() < 1e-7);

        let naive = naive_iterate(cos_map, &scalar(0.0), 1000, 1e-10).unwrap();
        let cfg = SolverConfig { tol: 1e-10, max_iter: 1000, ..Default::default() };
        let aa = anderson(cos_map, &scalar(0.0), &cfg).unwrap();
        assert!(aa.converged && naive.converged);
        assert!((aa.x_star.data()[0] - xstar).abs() < 1e-9);
        assert!(2 * aa.iterations <= naive.iterations, "{} vs {}", aa.iterations, naive.iterations);
    }

    #[test]
    fn memory_one_is_naive() {
        let cfg = SolverConfig { memory: 1, tol: 1e-12, max_iter: 200, ..Default::default() };
        let aa = anderson(cos_map, &scalar(0.3), &cfg).unwrap();
        let nv = naive_iterate(cos_map, &scalar(0.3), 200, 1e-12).unwrap();
        assert_eq!(aa.residuals, nv.residuals);
        assert_eq!(aa.x_star, nv.x_star);
    }

    #[test]
    fn divergence_is_reported() {
        let err = naive_iterate(|x| Ok(x.map(|v| 3.0 * v + 1.0)), &scalar(0.0), 100, 1e-8).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn singular_history_falls_back() {
        // A constant map produces identical residual differences after the
        // first step; the fallback path must still converge.
        let cfg = SolverConfig { tol: 1e-12, ..Default::default() };
        let r = anderson(|x| Ok(x.map(|_| 4.0)), &scalar(4.0 + 1e-3), &cfg).unwrap();
        assert!(r.converged);
        assert!((r.x_star.data()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn csv_export() {
        let r = naive_iterate(|x| Ok(x.map(|v| 0.5 * v)), &scalar(1.0), 3, 0.0).unwrap();
        let csv = r.residuals_csv();
        assert!(csv.starts_with("iter,residual\n1,"));
        assert_eq!(csv.lines().count(), 4);
    }
}
