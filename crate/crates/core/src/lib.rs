//! Sparse inverse entropic optimal transport.
//!
//! Estimates a sparse linear cost `c_A = Σ_k A_k C_k` from samples of an
//! entropic optimal transport coupling by ℓ1-penalized likelihood, and provides
//! the certificates that predict when the support of `A` is recovered.

pub mod error;
pub mod certificates;
pub mod cli;
pub mod eot;
pub mod gaussian;
pub mod graph;
pub mod iot;
pub mod limits;
mod lbfgs;
mod kernel;
pub mod linalg;
pub mod population;

pub use error::{IotError, Result};
