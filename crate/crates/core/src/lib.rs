//! Change-of-basis pruning for networks with tied-subspace rotational activations.
//!
//! The crate covers a small reverse-mode autodiff engine, the TSRA / radial
//! activation family, a PCA change-of-basis that is merged into the weights,
//! structured pruning with fixed-ratio and threshold rules, training loops, and
//! numeric checks on the occupied subspace of radial layers.

pub mod autodiff;
pub mod cob;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod nn;
pub mod pruning;
pub mod rng;
pub mod saturation;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
