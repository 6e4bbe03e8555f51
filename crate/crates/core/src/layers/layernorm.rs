use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor4};

use super::{join, Module, ParamMut, BN_EPSILON};

/// Layer normalization across the channel axis at every `(n, h, w)`
/// position (the ConvNeXt baseline's "channels-last" LN).
#[derive(Debug, Clone)]
pub struct LayerNormChannel<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub epsilon: f64,
    grad_gamma: Vec<T>,
    grad_beta: Vec<T>,
    cache: Option<(Tensor4<T>, Vec<T>)>,
}

impl<T: Element> LayerNormChannel<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            epsilon: BN_EPSILON,
            grad_gamma: vec![T::zero(); channels],
            grad_beta: vec![T::zero(); channels],
            cache: None,
        }
    }
}

impl<T: Element> Module<T> for LayerNormChannel<T> {
    fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let s = x.shape();
        let c = self.gamma.len();
        if s.c() != c {
            return Err(Error::Shape(format!("layer norm over {c} channels got input {s}")));
        }
        let plane = s.plane();
        let cf = T::of(c as f64);
        let eps = T::of(self.epsilon);
        let mut normalized = Tensor4::zeros(s);
        let mut out = Tensor4::zeros(s);
        let mut inv_std = vec![T::zero(); s.n() * plane];
        for n in 0..s.n() {
            for p in 0..plane {
                let at = |j: usize| x.data()[(n * c + j) * plane + p];
                let mean = (0..c).map(at).sum::<T>() / cf;
                let var = (0..c).map(|j| (at(j) - mean) * (at(j) - mean)).sum::<T>() / cf;
                let inv = T::one() / (var + eps).sqrt();
                inv_std[n * plane + p] = inv;
                for j in 0..c {
                    let i = (n * c + j) * plane + p;
                    let xh = (x.data()[i] - mean) * inv;
                    normalized.data_mut()[i] = xh;
                    out.data_mut()[i] = self.gamma[j] * xh + self.beta[j];
                }
            }
        }
        self.cache = Some((normalized, inv_std));
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (normalized, inv_std) = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("layer norm backward called without a cached forward".into()))?;
        normalized.check_same_shape(grad_out)?;
        let s = grad_out.shape();
        let (c, plane) = (s.c(), s.plane());
        let cf = T::of(c as f64);
        let mut grad_in = Tensor4::zeros(s);
        for n in 0..s.n() {
            for p in 0..plane {
                let mut sum_g = T::zero();
                let mut sum_gx = T::zero();
                for j in 0..c {
                    let i = (n * c + j) * plane + p;
                    let g = grad_out.data()[i];
                    let xh = normalized.data()[i];
                    self.grad_gamma[j] += g * xh;
                    self.grad_beta[j] += g;
                    let gs = g * self.gamma[j];
                    sum_g += gs;
                    sum_gx += gs * xh;
                }
                let inv = inv_std[n * plane + p];
                for j in 0..c {
                    let i = (n * c + j) * plane + p;
                    let gs = grad_out.data()[i] * self.gamma[j];
                    grad_in.data_mut()[i] = inv / cf * (cf * gs - sum_g - normalized.data()[i] * sum_gx);
                }
            }
        }
        Ok(grad_in)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        f(ParamMut {
            name: &join(prefix, "gamma"),
            value: &mut self.gamma,
            grad: &mut self.grad_gamma,
        });
        f(ParamMut {
            name: &join(prefix, "beta"),
            value: &mut self.beta,
            grad: &mut self.grad_beta,
        });
    }
}
