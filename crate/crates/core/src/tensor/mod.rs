//! Dense tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain row-major `f32` buffer with a shape and an optional
//! gradient slot. Differentiation is tape-based: operations executed through
//! a [`Tape`] record enough context to replay the chain rule in reverse, so
//! gradients land in the tape's nodes and can be read back per variable.

mod adam;
mod conv;
mod tape;

pub use adam::{AdamHyper, AdamState};
pub use tape::{RunningStats, Tape, Var, BN_EPS, BN_MOMENTUM};

use crate::error::{Error, Result};

/// Dense N-d array of `f32` in row-major order with an optional gradient
/// buffer of the same length.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("Tensor::new", "numel", numel, data.len()));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocating it zero-filled on first access.
    pub fn grad_mut(&mut self) -> &mut [f32] {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self.grad.as_mut().unwrap()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Interpret the shape as `[N, C, H, W]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::dim("dims4", "rank", 4, self.shape.len())),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Shape viewed as `(outer, channels, inner)` around the channel axis:
    /// axis 1 for rank >= 2, axis 0 for rank 1.
    pub(crate) fn channel_view(&self) -> (usize, usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1, 1),
            [c] => (1, *c, 1),
            s => (s[0], s[1], s[2..].iter().product()),
        }
    }

    /// Shape of this tensor with the channel axis collapsed to 1.
    pub(crate) fn channel_reduced_shape(&self) -> Vec<usize> {
        let mut shape = self.shape.clone();
        match shape.len() {
            0 => shape,
            1 => vec![1],
            _ => {
                shape[1] = 1;
                shape
            }
        }
    }
}
