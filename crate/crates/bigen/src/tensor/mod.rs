//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! The engine is generic over the scalar type: training runs at `f32`,
//! gradient-check oracles instantiate the same code at `f64` so central
//! finite differences stay tight.

use thiserror::Error;

pub mod adam;
pub mod check;
pub mod checkpoint;
pub mod graph;
pub mod params;

pub use adam::AdamState;
pub use graph::{Graph, Var};
pub use params::{LeafCache, ParamId, ParamStore};

/// Scalar types the engine runs on. `f32` for training, `f64` for oracles.
pub trait Scalar:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("scalar conversion from f64")
    }
    fn to_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar conversion to f64")
    }
    fn from_f32(x: f32) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("scalar conversion from f32")
    }
    fn to_f32(self) -> f32 {
        num_traits::ToPrimitive::to_f32(&self).expect("scalar conversion to f32")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {op}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("non-finite output produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward already ran on this graph; record a new forward pass first")]
    BackwardTwice,
    #[error("index {index} out of bounds for {op} with extent {extent}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        extent: usize,
    },
}

/// Dense row-major tensor. Shape extents are positive and their product
/// equals the data length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(TensorError::InvalidShape {
                op: "new",
                shape,
                reason: "extents must be positive",
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                op: "new",
                shape,
                reason: "extent product does not match data length",
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Row-major matrix from nested rows. All rows must share a length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, TensorError> {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n * d);
        for r in rows {
            if r.len() != d {
                return Err(TensorError::InvalidShape {
                    op: "from_rows",
                    shape: vec![n, r.len()],
                    reason: "ragged rows",
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![n, d], data)
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Extent pair for rank-2 tensors; rank-1 tensors count as a single row.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1..].iter().product()),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let (_, c) = self.rows_cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Lossless for f32->f64; f64->f32 rounds to nearest.
    pub fn convert<U: Scalar>(&self) -> Tensor<U> {
        self.map(|v| U::from_f64(v.to_f64()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_data() {
        let err = Tensor::new(vec![2, 3], vec![1.0f32; 5]).unwrap_err();
        assert!(matches!(err, TensorError::InvalidShape { .. }));
    }

    #[test]
    fn zero_extent_rejected() {
        let err = Tensor::<f32>::new(vec![0, 3], vec![]).unwrap_err();
        assert!(matches!(err, TensorError::InvalidShape { .. }));
    }

    #[test]
    fn rows_cols_treats_rank1_as_row() {
        let t = Tensor::new(vec![4], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.rows_cols(), (1, 4));
        assert_eq!(t.row(0), &[1.0, 2.0, 3.0, 4.0]);
    }
}
