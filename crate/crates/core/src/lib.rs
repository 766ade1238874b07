//! Lipschitz-regularized training for small convolutional networks, with
//! Gaussian-noise robustness evaluation and a distortion-radius guarantee
//! calculator.
//!
//! The crate is self-contained: [`graph`] provides a tape-based reverse-mode
//! autodiff over dense `f64` tensors, [`nn`] builds layer stacks on top of it,
//! [`lipschitz`] holds the perturbed-input quotient estimator and hinge
//! penalty, and [`train`] drives training and the evaluation protocol.

#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod lipschitz;
pub mod nn;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{DataError, Error, ModelError, Result, TensorError};
pub use graph::{Graph, Var};
pub use lipschitz::{KSpace, KStatistics, LipschitzParams};
pub use nn::{LayerSpec, Model, ModelRegistry};
pub use tensor::Tensor;
pub use train::HyperParams;

/// Version string embedded in report metadata.
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
