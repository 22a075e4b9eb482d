//! Physics-regularized Gaussian processes for stochastic vehicle trajectory estimation.

pub mod data;
pub mod error;
pub mod eval;
pub mod gp;
pub mod inference;
pub mod kernels;
pub mod physics;

pub use error::{PrgpError, Result};
