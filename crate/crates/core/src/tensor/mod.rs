//! Dense `f64` tensors with a recorded reverse-mode tape.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Handles
//! ([`Var`]) are plain indices into it, so expressions are written as
//! `tape.matmul(x, w)?` rather than through operator overloading. Learned
//! weights live in a [`ParameterStore`] and are bound to a tape with
//! [`Tape::param`]; after [`Tape::backward`] their adjoints are read back with
//! [`Tape::param_grads`].

mod gradcheck;
mod ops;
mod params;
mod tape;

use alloc::vec::Vec;

pub use gradcheck::{grad_check, try_grad_check, GradCheckReport, RESOLUTION_FACTOR};
pub use params::{Grads, Init, ParamId, ParameterStore};
pub use tape::{Branches, Tape, Var};

/// Negative slope of every leaky rectifier in the crate.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Epsilon inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value encountered in parameter `{name}`")]
    NonFinite { name: alloc::string::String },
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(alloc::string::String),
}

pub type Result<T> = core::result::Result<T, TensorError>;

/// Owned row-major tensor value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: alloc::vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: alloc::vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: alloc::vec![value],
        }
    }

    /// Builds a 2-D tensor from rows; all rows must have equal length.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::Shape {
                    op: "from_rows",
                    lhs: alloc::vec![cols],
                    rhs: alloc::vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(&[rows.len(), cols], data)
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
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[cfg(test)]
mod tests;
