//! Dense double-precision tensor with optional gradient storage.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Dense multi-dimensional array of `f64` values in row-major order.
///
/// The last shape entry is the feature dimension; all leading dimensions are
/// flattened into rows when the tensor participates in matrix operations.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput(format!("tensor shape {shape:?} has a zero or missing dimension")));
        }
        if numel != data.len() {
            return Err(Error::shape("Tensor::from_vec", format!("{numel} elements for shape {shape:?}"), data.len()));
        }
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    /// Normal(0, std) init, drawn row-major from the given RNG.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..numel).map(|_| dist.sample(rng)).collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    /// Mark the tensor as part of the trainable partition.
    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// (rows, cols) with all leading dimensions flattened into rows.
    /// A rank-1 tensor is a single row.
    pub fn matrix_dims(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("tensor has at least one dimension");
        if self.shape.len() == 1 {
            (1, cols)
        } else {
            (self.numel() / cols, cols)
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise maximum absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff requires equal shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::from_vec(vec![0.0; 6], &[2, 3]).is_ok());
        assert!(matches!(Tensor::from_vec(vec![0.0; 5], &[2, 3]), Err(Error::Shape { .. })));
    }

    #[test]
    fn matrix_dims_flattens_leading_dimensions() {
        let t = Tensor::zeros(&[2, 4, 8]);
        assert_eq!(t.matrix_dims(), (8, 8));
        let v = Tensor::zeros(&[5]);
        assert_eq!(v.matrix_dims(), (1, 5));
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let a = Tensor::randn(&[3, 3], 0.02, &mut rng_for(0, "init"));
        let b = Tensor::randn(&[3, 3], 0.02, &mut rng_for(0, "init"));
        assert_eq!(a.data, b.data);
        assert!(a.is_finite());
    }
}
