//! Minimal differentiable numeric substrate: dense row-major matrices with
//! a reverse-mode tape.
//!
//! Everything runs in f64. A [`Tape`] records each forward op and replays
//! them in reverse to produce gradients; every op checks shape
//! compatibility and rejects non-finite outputs. Vectors are 1 x n
//! matrices and scalars are 1 x 1.

use thiserror::Error;

mod tape;
pub mod gradcheck;

pub use tape::{Tape, Var};

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    BadLength { op: &'static str, len: usize, shape: (usize, usize) },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward root must be a scalar, got {shape:?}")]
    NotScalar { shape: (usize, usize) },
    #[error("backward already ran for this root; reset gradients first")]
    BackwardTwice,
}

/// Dense row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, KernelError> {
        if data.len() != rows * cols {
            return Err(KernelError::BadLength {
                op: "tensor",
                len: data.len(),
                shape: (rows, cols),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn row(values: Vec<f64>) -> Self {
        Tensor { rows: 1, cols: values.len(), data: values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// The single value of a 1 x 1 tensor.
    pub fn item(&self) -> Result<f64, KernelError> {
        if self.shape() != (1, 1) {
            return Err(KernelError::NotScalar { shape: self.shape() });
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
