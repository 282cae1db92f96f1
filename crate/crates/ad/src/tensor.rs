//! Dense row-major tensors.
//!
//! Shapes are arbitrary-rank, but the tape's primitives only ever build
//! rank-0 (scalar, shape `[]`) and rank-2 (matrix) values. A tensor carries a
//! `requires_grad` flag that decides whether the tape tracks gradients for it
//! when registered as a leaf.

use crate::error::{AdError, AdResult};
use crate::scalar::Scalar;
use rand::Rng;

/// Dense row-major array of scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor, validating that `data.len()` matches the shape.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> AdResult<Self> {
        let expected = shape.iter().product::<usize>();
        if data.len() != expected {
            return Err(AdError::DataLengthMismatch {
                shape,
                len: data.len(),
                expected,
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product::<usize>();
        Self {
            shape,
            data: vec![S::zero(); n],
            requires_grad: false,
        }
    }

    /// Tensor filled with a constant value.
    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let n = shape.iter().product::<usize>();
        Self {
            shape,
            data: vec![value; n],
            requires_grad: false,
        }
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
        }
    }

    /// Row vector `[1, n]` from a slice.
    pub fn row(values: &[S]) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values.to_vec(),
            requires_grad: false,
        }
    }

    /// Matrix `[rows, cols]` filled with uniform samples from `[lo, hi)`.
    ///
    /// Samples are drawn in `f64` and converted, so the draw sequence does
    /// not depend on the scalar type.
    pub fn rand_uniform<R: Rng>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product::<usize>();
        let data = (0..n).map(|_| S::c(rng.gen_range(lo..hi))).collect();
        Self {
            shape,
            data,
            requires_grad: false,
        }
    }

    /// Marks (or unmarks) the tensor as a trainable leaf and returns it.
    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a rank-0 / single-element tensor.
    pub fn item(&self) -> S {
        debug_assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    /// Element accessor for rank-2 tensors.
    pub fn at(&self, r: usize, c: usize) -> S {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    /// Mutable element accessor for rank-2 tensors.
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut S {
        debug_assert_eq!(self.shape.len(), 2);
        &mut self.data[r * self.shape[1] + c]
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn new_checks_data_length() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, AdError::DataLengthMismatch { expected: 6, .. }));
        let t = Tensor::<f64>::new(vec![2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
    }

    #[test]
    fn scalar_has_empty_shape() {
        let t = Tensor::scalar(4.5f64);
        assert!(t.is_scalar());
        assert_eq!(t.shape(), &[] as &[usize]);
        assert_eq!(t.item(), 4.5);
    }

    #[test]
    fn rand_uniform_is_deterministic_per_seed() {
        let mut a = ChaCha12Rng::seed_from_u64(9);
        let mut b = ChaCha12Rng::seed_from_u64(9);
        let ta = Tensor::<f64>::rand_uniform(vec![3, 3], -0.5, 0.5, &mut a);
        let tb = Tensor::<f64>::rand_uniform(vec![3, 3], -0.5, 0.5, &mut b);
        assert_eq!(ta, tb);
        assert!(ta.data().iter().all(|v| (-0.5..0.5).contains(v)));
    }

    #[test]
    fn rand_uniform_draws_match_across_scalar_types() {
        let mut a = ChaCha12Rng::seed_from_u64(3);
        let mut b = ChaCha12Rng::seed_from_u64(3);
        let t64 = Tensor::<f64>::rand_uniform(vec![4], -1.0, 1.0, &mut a);
        let t32 = Tensor::<f32>::rand_uniform(vec![4], -1.0, 1.0, &mut b);
        for (x, y) in t64.data().iter().zip(t32.data()) {
            assert_eq!(*y, *x as f32);
        }
    }
}
