//! Hybrid quantum-classical classification benchmark.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`autodiff`]), a
//! differentiable statevector simulator for angle-encoded variational circuits
//! ([`quantum`]), fold-local preprocessing ([`preprocessing`]), dataset loaders
//! ([`datasets`]), the classical, quantum and fusion model families ([`models`]),
//! the training loop ([`training`]), evaluation metrics ([`metrics`]) and the
//! cross-validation driver that produces result files ([`bench`]).

pub mod autodiff;
pub mod bench;
pub mod datasets;
pub mod matrix;
pub mod metrics;
pub mod models;
pub mod preprocessing;
pub mod quantum;
pub mod training;
mod error;

pub use error::{Error, Result};
pub use matrix::Matrix;
