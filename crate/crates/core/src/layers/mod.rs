//! Forward/backward primitives the blocks are assembled from.
//!
//! Every trainable layer implements [`Module`]: `forward` caches what the
//! matching `backward` needs, and `backward` accumulates parameter gradients
//! into buffers exposed through the parameter visitors.

mod activation;
mod attention;
mod batchnorm;
mod conv;
mod layernorm;
mod pool;

pub use activation::{gelu, gelu_backward, Activation, ActivationKind};
pub use attention::{default_heads, mhsa_backward, mhsa_forward, AttentionParams, MultiHeadAttention};
pub use batchnorm::{BatchNorm2d, BatchNormState, BN_EPSILON, BN_MOMENTUM};
pub use conv::{conv2d_backward, conv2d_forward, same_padding, Conv2d, ConvParams};
pub use layernorm::LayerNormChannel;
pub use pool::{avg_pool, avg_pool_backward};

use crate::error::Result;
use crate::tensor::{Element, Tensor4};

/// Normalization mode: batch statistics (`Train`) or running statistics (`Eval`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Mutable view of one parameter tensor and its gradient buffer.
pub struct ParamMut<'a, T> {
    pub name: &'a str,
    pub value: &'a mut [T],
    pub grad: &'a mut [T],
}

/// One named parameter gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad<T> {
    pub name: &'static str,
    pub values: Vec<T>,
}

/// Gradients of a single layer application.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad<T> {
    pub grad_input: Tensor4<T>,
    pub grad_params: Vec<ParamGrad<T>>,
}

impl<T> LayerGrad<T> {
    pub fn param(&self, name: &str) -> Option<&[T]> {
        self.grad_params
            .iter()
            .find(|p| p.name == name)
            .map(|p| p.values.as_slice())
    }
}

pub trait Module<T: Element> {
    fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>>;

    /// Returns the input gradient and adds parameter gradients to the
    /// layer's gradient buffers.
    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>>;

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T]));

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>));

    fn set_mode(&mut self, _mode: Mode) {}

    fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |p| p.grad.iter_mut().for_each(|g| *g = T::zero()));
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
