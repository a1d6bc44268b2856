//! Uncertainty vertex-weighted hypergraph learning (UVHL): per-case
//! uncertainty scoring with a heteroscedastic dual-head perceptron and
//! Monte-Carlo dropout, kNN hypergraph construction over cases, and
//! closed-form transductive label propagation, with a cross-validation
//! and ablation harness.

pub mod data;
pub mod error;
pub mod eval;
pub mod hypergraph;
pub mod solver;
pub mod uncertainty;

pub use error::{Result, UvhlError};
