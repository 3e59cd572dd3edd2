//! Dense tensors and a recorded reverse-mode differentiation engine.
//!
//! [`Tensor`] is an immutable, reference-counted, row-major array. Computation
//! over tensors is recorded on a [`Graph`] as [`Var`] nodes; [`gradient`]
//! performs the reverse sweep by emitting new nodes on the same graph, so the
//! gradients it returns can themselves be differentiated again.
//!
//! The storage element is generic ([`Element`]), with `f32` the default used
//! by every model, dataset and file format in the crate. The `f64`
//! instantiation exists so finite-difference checks can run without being
//! swamped by single-precision rounding.

mod fd;
mod graph;
mod kernels;

use std::fmt;
use std::iter::Sum;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub use fd::{finite_difference, max_relative_error};
pub use graph::{gradient, primitive_apply, Graph, Primitive, Var};

/// Storage scalar for tensors.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Default + Sum + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Element for f32 {}
impl Element for f64 {}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("gradient root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("leaf {index} is not part of the root's graph")]
    LeafNotInGraph { index: usize },
    #[error("operands belong to different graphs")]
    GraphMismatch,
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("{op}: expected {expected} operands, got {got}")]
    Arity { op: &'static str, expected: usize, got: usize },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Immutable dense array, row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<E = f32> {
    shape: Vec<usize>,
    data: Arc<[E]>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let valid = !shape.is_empty() && shape.iter().all(|&d| d > 0);
        if !valid || shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::InvalidShape { shape, len: data.len() });
        }
        Ok(Self { shape, data: data.into() })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<E>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data: data.into() }
    }

    pub fn from_slice(shape: &[usize], data: &[E]) -> Result<Self> {
        Self::new(shape.to_vec(), data.to_vec())
    }

    pub fn scalar(v: E) -> Self {
        Self::from_parts(vec![1], vec![v])
    }

    pub fn vector(data: Vec<E>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        Self::from_parts(shape.to_vec(), vec![v; shape.iter().product()])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.data.to_vec()
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> E {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                shapes: vec![self.shape.clone(), shape.to_vec()],
            });
        }
        Ok(Self { shape: shape.to_vec(), data: Arc::clone(&self.data) })
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| F::from_f64_lossy(v.as_f64())).collect(),
        )
    }

    /// Sum of squares accumulated in f64.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|&v| v.as_f64() * v.as_f64()).sum()
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.numel() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distribution {
    StandardNormal,
    Uniform01,
}

/// Seeded random tensor.
///
/// The generator is ChaCha8 seeded via `seed_from_u64`; normal draws use
/// `rand_distr`'s ziggurat sampler in f64, rounded to f32. Both are pinned by
/// the workspace lockfile, so a `(shape, distribution, seed)` triple yields
/// the same bits on every platform.
pub fn rng_tensor(shape: &[usize], distribution: Distribution, seed: u64) -> Result<Tensor<f32>> {
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = match distribution {
        Distribution::StandardNormal => {
            (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect()
        }
        Distribution::Uniform01 => (0..n).map(|_| rng.random::<f32>()).collect(),
    };
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn rng_is_deterministic() {
        let a = rng_tensor(&[4, 5], Distribution::StandardNormal, 7).unwrap();
        let b = rng_tensor(&[4, 5], Distribution::StandardNormal, 7).unwrap();
        let c = rng_tensor(&[4, 5], Distribution::StandardNormal, 8).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(a, c);
    }

    #[test]
    fn normal_mean_is_near_zero() {
        let t = rng_tensor(&[100_000], Distribution::StandardNormal, 1).unwrap();
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn uniform_in_unit_interval() {
        let t = rng_tensor(&[50_000], Distribution::Uniform01, 3).unwrap();
        assert!(t.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    }
}
