//! Fixed-point solvers (plain and Anderson-accelerated), Perron–Frobenius
//! eigenvalue estimation and the well-posedness projection.

mod fixed_point;
mod projection;
mod spectral;

pub use fixed_point::{
    anderson, naive_iterate, relative_residual, SolverConfig, SolverResult, DIVERGENCE_THRESHOLD,
};
pub use projection::{project_l1_ball, project_wellposed};
pub use spectral::pf_eigenvalue;
