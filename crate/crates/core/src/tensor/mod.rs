//! Dense tensors with a tape-based reverse-mode differentiator.
//!
//! [`Tensor`] is an immutable-by-convention value: a row-major buffer plus a
//! shape of at most four extents. All trainable computations are recorded on a
//! [`Graph`], one graph per optimization step, and parameters live in a
//! [`ParamStore`] outside the graph.
//!
//! Everything is generic over [`Real`] so the same operator code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

mod graph;
pub mod ops;
mod optim;
mod params;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use graph::{Gradients, Graph, Var};
pub use optim::{sgd_step, Sgd, SgdConfig};
pub use params::{Bindings, ParamId, ParamStore};

/// Floating point element type of a tensor.
pub trait Real:
    Float + Default + Debug + Display + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    /// Converts an `f64` literal, rounding to the element precision.
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Variance floor inside the square root of [`ops::channel_stats`].
pub const STATS_EPS: f64 = 1e-5;
/// Guard for divisions by vector norms.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {actual} values were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("tensors of rank {0} are not supported (at most 4)")]
    Rank(usize),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract error: {0}")]
    Contract(String),
}

pub(crate) fn dim_err(msg: impl Into<String>) -> TensorError {
    TensorError::Dimension(msg.into())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        if shape.len() > 4 {
            return Err(TensorError::Rank(shape.len()));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        assert!(
            shape.len() <= 4,
            "tensors of rank above 4 are not supported"
        );
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    /// Samples i.i.d. normal entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Extents of a rank-4 feature map as `[batch, channels, height, width]`.
    pub fn dims4(&self) -> Result<[usize; 4], TensorError> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(dim_err(format!(
                "expected a (batch, channels, height, width) map, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self, TensorError> {
        Self::new(shape, self.data)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(
            self.data.len(),
            1,
            "item() on a tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm of the flattened data, accumulated in `f64`.
    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Concatenates tensors along the leading axis.
    pub fn cat_batch(parts: &[Tensor<T>]) -> Result<Self, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err("cannot concatenate an empty list of tensors"))?;
        if first.ndim() == 0 {
            return Err(dim_err("cannot concatenate scalars along a batch axis"));
        }
        let tail = &first.shape[1..];
        let mut n = 0;
        let mut data = Vec::with_capacity(parts.iter().map(Tensor::numel).sum());
        for p in parts {
            if p.ndim() != first.ndim() || &p.shape[1..] != tail {
                return Err(dim_err(format!(
                    "batch concatenation of {:?} with {:?}",
                    first.shape, p.shape
                )));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Self::new(&shape, data)
    }

    /// Rows `range` of the leading axis.
    pub fn slice_batch(&self, range: std::ops::Range<usize>) -> Result<Self, TensorError> {
        if self.ndim() == 0 || range.end > self.shape[0] || range.start > range.end {
            return Err(dim_err(format!(
                "batch slice {range:?} out of bounds for shape {:?}",
                self.shape
            )));
        }
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = range.len();
        Self::new(
            &shape,
            self.data[range.start * row..range.end * row].to_vec(),
        )
    }
}
