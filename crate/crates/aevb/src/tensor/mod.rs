//! Dense 64-bit float tensors and reverse-mode automatic differentiation.
//!
//! The pieces here are deliberately small: a [`Tensor`] is a shape plus a
//! row-major `Vec<f64>`, a [`Tape`] is an append-only record of primitive
//! applications, and a [`Var`] is a copyable handle into a tape. Gradients
//! come from a single reverse sweep over the tape. Everything is
//! single-threaded and deterministic: the same seed replays the same
//! arithmetic bit for bit, which the training loop and the checkpoint
//! round-trip tests rely on.

mod fd;
mod rng;
mod tape;

pub use fd::finite_difference_gradient;
pub use rng::SeededRng;
pub use tape::{Gradients, Tape, Var};

/// Value-level log normalizing constant of the continuous Bernoulli —
/// the same scalar function the tape primitive applies elementwise.
pub fn cb_log_norm_scalar_value(lambda: f64) -> f64 {
    tape::cb_log_norm_scalar(lambda)
}

use crate::error::{Error, Result};
use std::fmt;

/// Shape plus row-major data. Rank 0 (empty shape, one element) is the
/// scalar case; reductions produce it and broadcasting treats it as a
/// value repeated over every axis.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that the data length matches the shape
    /// product (the empty product is 1, so a scalar carries one element).
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                shapes: vec![shape.clone()],
                detail: format!("shape wants {numel} elements, data has {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; numel] }
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Independent standard-normal entries drawn from `rng`.
    pub fn randn(shape: &[usize], rng: &mut SeededRng) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.normal()).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a one-element tensor.
    pub fn scalar_value(&self) -> f64 {
        assert!(self.is_scalar(), "scalar_value on shape {:?}", self.shape);
        self.data[0]
    }

    /// Element (i, j) of a rank-2 tensor.
    pub fn get2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Copies the given rows (axis 0) into a new tensor, preserving the
    /// trailing shape. Used to materialize mini-batches.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        assert!(!self.shape.is_empty(), "gather_rows needs rank >= 1");
        let row: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor { shape, data }
    }

    /// Same data viewed under a different shape (numel must match).
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                shapes: vec![self.shape.clone(), shape.to_vec()],
                detail: format!("cannot view {} elements as {shape:?}", self.data.len()),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Maximum absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 8 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(
                f,
                "Tensor{:?}[{}, {}, ... ({} elems)]",
                self.shape,
                self.data[0],
                self.data[1],
                self.data.len()
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_product() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        // Empty shape = scalar: product is 1.
        assert!(Tensor::from_vec(vec![], vec![1.5]).is_ok());
        assert!(Tensor::from_vec(vec![], vec![]).is_err());
    }

    #[test]
    fn gather_rows_preserves_trailing_shape() {
        let t = Tensor::from_vec(vec![3, 2, 2], (0..12).map(|x| x as f64).collect()).unwrap();
        let g = t.gather_rows(&[2, 0]);
        assert_eq!(g.shape(), &[2, 2, 2]);
        assert_eq!(g.data(), &[8.0, 9.0, 10.0, 11.0, 0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn eye_is_identity() {
        let i = Tensor::eye(3);
        assert_eq!(i.get2(0, 0), 1.0);
        assert_eq!(i.get2(0, 1), 0.0);
        assert_eq!(i.numel(), 9);
    }
}
