//! Scalar abstraction: the numeric element type of tensors and tapes.

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating-point element type for all tensor math.
///
/// Implemented for `f32` and `f64`. Every bound is needed somewhere in the
/// tape or the optimizers; the two conversion helpers keep literal-heavy
/// numeric code readable.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssignOps
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal into this scalar type.
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal not representable in scalar type")
    }

    /// Widens this scalar to `f64` (exact for `f32` and `f64`).
    fn to_f64c(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
