//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shape plus a flat row-major `f64` buffer. Operations on
//! tensors record their inputs, so calling [`Scalar::backward`] on a loss
//! walks the recorded graph in reverse and accumulates gradients into every
//! tensor that was created with `requires_grad`.
//!
//! The canonical image layout is `[batch, channels, height, width]`.
//! Everything is `f64` and every operation reduces in a fixed order, so
//! identical inputs produce bit-identical outputs.

mod grad;
mod ops;

pub use ops::{channel_norm, concat_channels, cross_entropy};

use std::sync::{Arc, RwLock};
use thiserror::Error;

use ops::Op;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch ({context}): expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
}

impl TensorError {
    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        TensorError::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}

/// Elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Swish,
}

/// Whether normalization uses batch statistics (training) or the stored
/// running statistics (inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Per-channel running statistics owned by a normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl NormState {
    pub fn new(channels: usize) -> Self {
        NormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

pub(crate) struct TensorInner {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Option<Op>,
}

/// Shared handle to a tensor node. Cloning is cheap and aliases the buffer.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<RwLock<TensorInner>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.read().unwrap();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            inner.shape, inner.requires_grad
        )
    }
}

impl Tensor {
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Option<Op>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Arc::new(RwLock::new(TensorInner {
                shape,
                data,
                grad: None,
                requires_grad: op.is_some(),
                op,
            })),
        }
    }

    /// Leaf tensor from explicit contents. Fails unless the data length
    /// equals the product of the extents.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor, TensorError> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidArgument(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if data.len() != expected {
            return Err(TensorError::InvalidArgument(format!(
                "data length {} does not match shape {:?} (product {})",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Tensor::from_op(shape.to_vec(), data, None))
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor, TensorError> {
        let t = Tensor::from_vec(shape, data)?;
        t.inner.write().unwrap().requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let len = shape.iter().product();
        Tensor::from_op(shape.to_vec(), vec![0.0; len], None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let len = shape.iter().product();
        Tensor::from_op(shape.to_vec(), vec![value; len], None)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.read().unwrap().shape.clone()
    }

    pub fn num_elements(&self) -> usize {
        self.inner.read().unwrap().data.len()
    }

    /// Snapshot of the values.
    pub fn data(&self) -> Vec<f64> {
        self.inner.read().unwrap().data.clone()
    }

    /// Overwrites the values in place. The replacement must have the same
    /// length; the shape is unchanged.
    pub fn set_data(&self, data: Vec<f64>) {
        let mut inner = self.inner.write().unwrap();
        assert_eq!(
            data.len(),
            inner.data.len(),
            "set_data length mismatch for shape {:?}",
            inner.shape
        );
        inner.data = data;
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.read().unwrap().requires_grad
    }

    /// Snapshot of the accumulated gradient, if any backward pass has
    /// reached this tensor since the last [`Tensor::zero_grad`].
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.read().unwrap().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.write().unwrap().grad = None;
    }

    /// Stable identity of the underlying node, used as a graph key.
    pub(crate) fn key(&self) -> usize {
        Arc::as_ptr(&self.inner) as usize
    }

    pub(crate) fn has_op(&self) -> bool {
        self.inner.read().unwrap().op.is_some()
    }

    pub(crate) fn with_op<R>(&self, f: impl FnOnce(Option<&Op>) -> R) -> R {
        let inner = self.inner.read().unwrap();
        f(inner.op.as_ref())
    }

    pub(crate) fn accumulate_grad(&self, flow: &[f64]) {
        let mut inner = self.inner.write().unwrap();
        match &mut inner.grad {
            Some(g) => {
                for (gi, fi) in g.iter_mut().zip(flow) {
                    *gi += fi;
                }
            }
            None => inner.grad = Some(flow.to_vec()),
        }
    }
}

/// A tracked scalar, the value type of losses.
#[derive(Clone, Debug)]
pub struct Scalar {
    tensor: Tensor,
}

impl Scalar {
    pub(crate) fn from_tensor(tensor: Tensor) -> Scalar {
        debug_assert_eq!(tensor.num_elements(), 1);
        Scalar { tensor }
    }

    pub fn value(&self) -> f64 {
        self.tensor.data()[0]
    }

    /// Runs reverse-mode accumulation from this scalar. Gradients add into
    /// the `grad` buffer of every `requires_grad` tensor reachable from it;
    /// call [`Tensor::zero_grad`] between steps for fresh gradients.
    pub fn backward(&self) -> Result<(), TensorError> {
        grad::run_backward(&self.tensor)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }
}

#[cfg(test)]
mod tests;
