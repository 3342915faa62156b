//! Small dense-tensor toolkit with hand-derived reverse-mode gradients.
//!
//! Parameters live in one flat buffer inside a [`ParamStore`]; layers remember
//! the slice of that buffer they own. Every forward routine has a matching
//! backward routine that *accumulates* into a flat gradient buffer of the same
//! layout, so gradients from many samples (or many ODE steps) add up without
//! intermediate allocation.
//!
//! [`ConcatSquash`] additionally supports forward-mode tangents (`*_dual`):
//! alongside the value it propagates a set of input directions, which is how
//! the flow obtains Jacobian diagonals. The dual backward pass differentiates
//! through the tangents as well, giving exact gradients of trace terms.

mod layers;
mod store;

pub use layers::{
    linear_backward, linear_forward, sigmoid, tanh, tanh_backward, tanh_forward, Activation,
    ConcatSquash, ContextTerms, Linear,
};
pub use store::{AdamConfig, Init, ParamId, ParamSlice, ParamStore};

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(invalid_arg!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            values,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}
