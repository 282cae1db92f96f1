//! Minimal reverse-mode automatic differentiation on a define-by-run tape.
//!
//! The crate provides:
//! - [`Tensor`]: a dense row-major array of floating-point values,
//! - [`Tape`]: a recording of primitive operations with eager forward
//!   evaluation and a single-sweep backward pass,
//! - [`optim`]: Adam and SGD steps over named parameter sets with
//!   non-finite guards,
//! - [`check`]: a central finite-difference gradient checker and a
//!   randomized per-primitive check suite,
//! - [`rng`]: deterministic seed derivation and epoch shuffling helpers.
//!
//! All numeric code is generic over [`Scalar`] (any IEEE float exposed by
//! `num-traits`); the crate root pins `f64` aliases for the common case.

pub mod check;
pub mod error;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::AdError;
pub use optim::{collect_grads, Adam, GradMap, Joint, ParamSet, Sgd};
pub use scalar::Scalar;
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

/// Concrete `f64` tensor, the default precision for training and tests.
pub type Tensor64 = tensor::Tensor<f64>;
/// Concrete `f64` tape.
pub type Tape64 = tape::Tape<f64>;
/// Concrete `f64` Adam optimizer.
pub type Adam64 = optim::Adam<f64>;
/// Concrete `f64` SGD optimizer.
pub type Sgd64 = optim::Sgd<f64>;
