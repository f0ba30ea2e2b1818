//! Dense real-tensor substrate with reverse-mode differentiation.
//!
//! Just enough machinery for a small decoder-only transformer and its two
//! training objectives: flat row-major tensors, a Wengert tape recording
//! forward ops, and a gradient checker driven by central differences.
//! Training runs in `f32`; gradient checks instantiate everything in `f64`.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Tape, Var};

use thiserror::Error;

/// Element type for tensors. `f32` is the training default, `f64` is used
/// for gradient checks.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for lossy literal conversion into the element type.
#[inline]
pub fn scalar<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("f64 converts into every Scalar")
}

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch ({details})")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("{op}: index {index} out of range for {limit}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Dense row-major tensor. `grad`, when present, mirrors `data`'s shape and
/// holds the most recent gradient pulled off a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length must match shape product"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    pub fn scalar_value(x: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, g: Vec<S>) {
        assert_eq!(g.len(), self.data.len(), "gradient shape must match data");
        self.grad = Some(g);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Rows × cols view of a 2-d tensor; 1-d tensors count as a single row.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("rows_cols on tensor of rank {}", self.shape.len()),
        }
    }

    /// Convert the element type, rounding through `f64`.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| scalar(x.to_f64().expect("finite")))
                .collect(),
            grad: None,
        }
    }
}
