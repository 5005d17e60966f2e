//! Semi-supervised domain adaptation laboratory.
//!
//! Implements prototype-based balanced pseudo-labeling in an embedding space,
//! filtered instance-contrastive alignment, and adversarial minimax entropy on
//! top of a small reverse-mode autodiff engine, with synthetic domain-shift
//! benchmarks and a reproducible experiment harness.

pub mod error;
pub mod graph;
pub mod losses;
pub mod model;
pub mod pseudo;
pub mod queue;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
