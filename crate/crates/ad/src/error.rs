//! Error type shared by tensor construction, tape operations, and optimizers.

use thiserror::Error;

/// Errors raised by the autodiff core.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum AdError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("tensor data length {len} does not match shape {shape:?} (expects {expected})")]
    DataLengthMismatch {
        shape: Vec<usize>,
        len: usize,
        expected: usize,
    },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("non-finite gradient for parameter '{param}'")]
    NonFiniteGradient { param: String },

    #[error("non-finite value in parameter '{param}' after optimizer step")]
    NonFiniteParam { param: String },

    #[error("non-finite loss value {value}")]
    NonFiniteLoss { value: f64 },
}

/// Result alias for the autodiff core.
pub type AdResult<T> = Result<T, AdError>;
