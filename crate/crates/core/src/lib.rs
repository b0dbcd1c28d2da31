//! Agent-guided deep-equilibrium graph network over binary control flow
//! graphs.

pub mod asm;
pub mod error;
pub mod executor;
pub mod graph;
pub mod harness;
pub mod nn;
pub mod solver;
pub mod training;

pub use error::{Error, GraphError, Result};
