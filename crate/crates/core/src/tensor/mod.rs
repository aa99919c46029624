//! Minimal dense-tensor engine with tape-based reverse-mode autodiff.
//!
//! Tensors are 4-D (batch, channel, height, width), row-major, `f32`, and
//! immutable once created; cloning shares the underlying buffer. Gradients
//! are recorded on a [`Tape`] and materialized by [`Tape::backward`].

mod grad_check;
mod kernels;
mod tape;

pub use grad_check::grad_check;
pub use kernels::{conv_out_dim, convt_out_dim};
pub use tape::{Gradients, Tape};

use std::fmt;
use std::sync::Arc;

/// (batch, channels, height, width)
pub type Shape = [usize; 4];

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Two shapes that must agree do not; both are carried in the message.
    ShapeMismatch {
        context: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    /// An operation precondition was violated.
    Contract {
        context: &'static str,
        message: String,
    },
    /// A computation produced NaN or infinity.
    NonFinite { context: &'static str },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { context, lhs, rhs } => {
                write!(f, "{context}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            TensorError::Contract { context, message } => write!(f, "{context}: {message}"),
            TensorError::NonFinite { context } => {
                write!(f, "{context}: non-finite value encountered")
            }
        }
    }
}

impl std::error::Error for TensorError {}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense NCHW tensor. `node` ties the value to a position on a tape when the
/// tensor participates in a recorded computation.
#[derive(Clone)]
pub struct Tensor {
    shape: Shape,
    data: Arc<Vec<f32>>,
    node: Option<usize>,
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Tensor> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(TensorError::Contract {
                context: "Tensor::from_vec",
                message: format!("data length {} does not match shape {:?}", data.len(), shape),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: Shape) -> Tensor {
        Tensor {
            data: Arc::new(vec![0.0; shape.iter().product()]),
            shape,
            node: None,
        }
    }

    pub fn full(shape: Shape, value: f32) -> Tensor {
        Tensor {
            data: Arc::new(vec![value; shape.iter().product()]),
            shape,
            node: None,
        }
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::full([1, 1, 1, 1], value)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.as_ref().clone()
    }

    /// Tape node id, when this tensor was produced by (or registered with) a
    /// recording tape.
    pub fn node(&self) -> Option<usize> {
        self.node
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, no tape attachment.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape,
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> f32 {
        let [_, cc, hh, ww] = self.shape;
        self.data[((b * cc + c) * hh + h) * ww + w]
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn with_node(shape: Shape, data: Vec<f32>, node: Option<usize>) -> Tensor {
        Tensor {
            shape,
            data: Arc::new(data),
            node,
        }
    }


    pub(crate) fn set_node(&mut self, node: Option<usize>) {
        self.node = node;
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor{:?}[node={:?}, first={:?}]",
            self.shape,
            self.node,
            self.data.first()
        )
    }
}

/// Sum of all elements, accumulated in f64. Used for metrics where the f32
/// tape value is too coarse (finite-difference checks, bit accounting).
pub fn sum_f64(t: &Tensor) -> f64 {
    t.data().iter().map(|&v| v as f64).sum()
}

/// Scalar softplus, the same function the tape op applies elementwise.
pub fn softplus_scalar(x: f32) -> f32 {
    tape::softplus_f32(x)
}
