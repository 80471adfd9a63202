//! Dense f64 tensors and a define-by-run reverse-mode autodiff tape.
//!
//! Layout is row-major over the listed axes; image batches are NHWC
//! `[n, h, w, c]`. A scalar is a rank-0 tensor with shape `[]` and one
//! element. The tape lives in [`Graph`]: rebuild it for every forward pass,
//! call [`Graph::backward`] once, then start over.

mod conv;
mod graph;

pub use conv::{conv_output_dim, pad_before, Padding};
pub use graph::{Gradients, Graph, Var};

use thiserror::Error;

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: data length {len} does not match shape {shape:?} ({expect} elements)")]
    LengthMismatch {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
        expect: usize,
    },
    #[error("{op}: expected rank-{expect} input, got shape {got:?}")]
    RankMismatch {
        op: &'static str,
        expect: usize,
        got: Vec<usize>,
    },
    #[error("{op}: axis {axis} mismatch: {lhs} vs {rhs}")]
    AxisMismatch {
        op: &'static str,
        axis: usize,
        lhs: usize,
        rhs: usize,
    },
    #[error("{op}: shapes {lhs:?} and {rhs:?} differ")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("reshape: cannot view {numel} elements as {shape:?}")]
    BadReshape { numel: usize, shape: Vec<usize> },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: duplicate reduction axis {axis}")]
    DuplicateAxis { op: &'static str, axis: usize },
    #[error("{op}: stride must be positive")]
    ZeroStride { op: &'static str },
    #[error("conv2d_transpose: only same padding is supported")]
    TransposeValidPadding,
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward: tape already consumed; run a new forward pass first")]
    TapeConsumed,
    #[error("{op}: variable does not belong to this graph")]
    ForeignVar { op: &'static str },
}

/// A dense, row-major, f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    /// Build a tensor from a shape and matching flat data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(TensorError::LengthMismatch {
                op: "Tensor::new",
                len: data.len(),
                shape,
                expect,
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
        }
    }

    /// Constant-filled tensor of the given shape.
    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: false,
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
        }
    }

    /// Mark this tensor as a differentiable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// The value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.data[0]
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Consume the tensor, keeping only its flat data.
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}
