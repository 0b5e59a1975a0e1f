//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! [`Tensor`] is a plain row-major array with an optional gradient buffer.
//! Differentiable computations are recorded on a [`Tape`]; parameters are
//! copied onto the tape with [`Tape::param`], the forward pass is built from
//! tape operations, and [`Tape::backward`] replays the chain rule. Gradients
//! are read back with [`Tape::grad`] and handed to an optimizer such as
//! [`Adam`].
//!
//! The non-differentiable entry points in [`kernels`] compute the same
//! values directly on tensors; the tape operations call into them.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

pub mod gradcheck;
pub mod kernels;
mod optim;
mod tape;

pub use optim::{Adam, AdamConfig};
pub use tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },
    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("{op}: index {index} out of range 0..{bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{0}")]
    Usage(String),
}

impl TensorError {
    pub(crate) fn dim(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Dimension { op, msg: msg.into() }
    }

    pub(crate) fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Domain { op, msg: msg.into() }
    }
}

/// Row-major `f64` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::dim(
                "tensor",
                alloc::format!("shape {shape:?} must be non-empty with positive dimensions"),
            ));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::dim(
                "tensor",
                alloc::format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n]).expect("zeros: invalid shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n]).expect("full: invalid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::dim("from_rows", "ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(TensorError::dim(
                "dims2",
                alloc::format!("expected a 2-D tensor, got shape {other:?}"),
            )),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = *self.shape.last().unwrap();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        let c = *self.shape.last().unwrap();
        self.data[i * c + j]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<(), TensorError> {
        if grad.len() != self.data.len() {
            return Err(TensorError::Shape {
                op: "set_grad",
                lhs: self.shape.clone(),
                rhs: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [f64], Option<&mut Vec<f64>>) {
        (&mut self.data, self.grad.as_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests;
