//! Dense row-major f64 tensors.
//!
//! A [`Tensor`] owns its data and shape. All model state, datasets, and
//! intermediate values in the tape use this one representation. Gradients are
//! plain `Vec<f64>` buffers aligned element-for-element with tensor data.

use thiserror::Error;

/// Errors raised by tensor and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    /// Operand shapes do not satisfy the operation's contract.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    /// An argument value is outside the operation's domain.
    #[error("invalid argument for {op}: {detail}")]
    InvalidArg { op: &'static str, detail: String },
    /// A non-finite value reached an operation that cannot tolerate it.
    #[error("non-finite value in {op}: {detail}")]
    NonFinite { op: &'static str, detail: String },
    /// The call sequence violated the tape's usage contract.
    #[error("tape contract violated in {op}: {detail}")]
    Contract { op: &'static str, detail: String },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::InvalidArg { op, detail: detail.into() }
    }

    pub(crate) fn non_finite(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::NonFinite { op, detail: detail.into() }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Contract { op, detail: detail.into() }
    }
}

/// Dense row-major tensor of f64 values. The data buffer is shared on clone
/// and copied only when mutated, so clones and reshapes are cheap.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: std::sync::Arc<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor from a shape and a row-major data buffer.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::shape(
                "tensor_new",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data: std::sync::Arc::new(data), requires_grad: false })
    }

    /// Zero-filled tensor.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: std::sync::Arc::new(vec![0.0; numel]), requires_grad: false }
    }

    /// Tensor with every element set to `value`.
    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: std::sync::Arc::new(vec![value; numel]), requires_grad: false }
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: std::sync::Arc::new(vec![value]), requires_grad: false }
    }

    /// Same data buffer under a new shape with equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::shape(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape, shape),
            ));
        }
        Ok(Tensor { shape, data: std::sync::Arc::clone(&self.data), requires_grad: self.requires_grad })
    }

    /// Marks the tensor as a differentiation target and returns it.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        std::sync::Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Size of the trailing dimension, or 1 for a 0-d tensor.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1usize; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    /// Flat offset of a multi-dimensional index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        let mut stride = 1;
        for axis in (0..self.shape.len()).rev() {
            debug_assert!(index[axis] < self.shape[axis]);
            off += index[axis] * stride;
            stride *= self.shape[axis];
        }
        off
    }

    /// Value at a multi-dimensional index.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    /// Mutates the value at a multi-dimensional index.
    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        std::sync::Arc::make_mut(&mut self.data)[off] = value;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64, TensorError> {
        if self.data.len() != 1 {
            return Err(TensorError::shape(
                "item",
                format!("expected 1 element, tensor has shape {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
