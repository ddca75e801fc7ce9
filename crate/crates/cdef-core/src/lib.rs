//! Cost-configurable adversarial defense toolkit.
//!
//! Trains small dense classifiers with attack sensitive loss functions,
//! crafts targeted adversarial examples (IFGSM, PGD, C&W L2), measures
//! per-pair robustness matrices, and tunes the attack sensitive matrix
//! with two greedy searches: one for weighted average robustness, one for
//! lower bound robustness.

pub mod attacks;
pub mod commands;
pub mod config;
pub mod dataio;
pub mod error;
pub mod losses;
pub mod manifest;
pub mod model;
pub mod robustness;
pub mod search;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
