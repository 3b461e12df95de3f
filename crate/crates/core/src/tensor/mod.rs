//! Dense f64 tensors with a dynamic reverse-mode tape.
//!
//! Tensors are plain row-major buffers. Differentiable computation happens on a
//! [`Tape`]: leaves are registered as trainable parameters or constants, every op
//! appends a node, and [`Tape::backward`] walks the nodes in reverse. A tape
//! built with [`Tape::no_grad`] treats every leaf as a constant and keeps no
//! backward state, which is how the gradient-free rollout is evaluated.

mod adamw;
mod embed;
mod kernels;
mod tape;

pub use adamw::{AdamW, AdamWConfig, AdamWState};
pub use embed::{time_embedding, time_embedding_with_base};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel], grad: None }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel], grad: None }
    }

    /// A 0-d tensor.
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![value], grad: None }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape(&[], &self.shape));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(shape, &self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(&self.shape, &[grad.len()]));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same tensor without its gradient buffer.
    pub(crate) fn detached(&self) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.clone(), grad: None }
    }
}

/// A linear map between flat buffers together with its adjoint.
///
/// Used to put the CT projector on the tape: the forward pass applies the map,
/// the backward pass applies the adjoint to the incoming gradient.
pub trait LinearOperator: Send + Sync {
    fn input_shape(&self) -> Vec<usize>;
    fn output_shape(&self) -> Vec<usize>;
    fn apply(&self, input: &[f64], output: &mut [f64]);
    fn apply_adjoint(&self, input: &[f64], output: &mut [f64]);
}
