//! Dense-tensor and reverse-mode automatic-differentiation substrate.
//!
//! Everything model-shaped in this crate is built from [`Tensor`] values
//! combined through a [`Graph`], which records enough information during the
//! forward pass to replay the chain rule backwards. Training runs in `f32`;
//! gradient-check suites can instantiate the same code at `f64` through the
//! [`Scalar`] trait.

mod conv;
mod gradcheck;
mod graph;

pub use conv::{conv2d_shape, conv_transpose2d_shape};
pub use gradcheck::{grad_check, GradCheckConfig, GradReport, ParamError};
pub use graph::{GradStore, Graph, NodeId};

use crate::error::{Error, Result};

/// Float precision the substrate is generic over. `f32` for training,
/// `f64` for gradient checks.
pub trait Scalar:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64x(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64x(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64x(self) -> f64 {
        self
    }
}

/// Dense row-major tensor. `product(shape) == data.len()` always holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: F) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar_value(v: F) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Gaussian init with the given std. Deterministic for a fixed rng state.
    pub fn randn<R: rand::Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0f64, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| F::from_f64(normal.sample(rng)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Number of rows when viewed as a 2-D matrix (requires ndim == 2).
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn at2(&self, r: usize, c: usize) -> F {
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.shape[1] + c] = v;
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.to_f64x())).collect(),
        }
    }

    pub(crate) fn accumulate(&mut self, other: &Tensor<F>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }
}

/// Named parameter collection with deterministic iteration order.
pub type ParamSet<F> = std::collections::BTreeMap<String, Tensor<F>>;

/// Cast every tensor of a parameter set to another precision.
pub fn cast_params<F: Scalar, G: Scalar>(params: &ParamSet<F>) -> ParamSet<G> {
    params
        .iter()
        .map(|(k, v)| (k.clone(), v.cast::<G>()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_shape() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn randn_deterministic_for_fixed_seed() {
        use rand::SeedableRng;
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f32>::randn(&[4, 4], 0.02, &mut r1);
        let b = Tensor::<f32>::randn(&[4, 4], 0.02, &mut r2);
        assert_eq!(a, b);
    }

    #[test]
    fn cast_roundtrip() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::<f32>::randn(&[3, 3], 1.0, &mut rng);
        let back: Tensor<f32> = a.cast::<f64>().cast::<f32>();
        assert_eq!(a, back);
    }
}
