use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor4};

use super::{Module, ParamMut};

const GELU_COEFF: f64 = 0.044715;

#[inline]
fn sqrt_2_over_pi<T: Element>() -> T {
    T::of((2.0 / std::f64::consts::PI).sqrt())
}

/// Tanh-form GELU: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
#[inline]
pub fn gelu<T: Element>(x: T) -> T {
    let inner = sqrt_2_over_pi::<T>() * (x + T::of(GELU_COEFF) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

/// Derivative of [`gelu`] at `x`, times `grad`.
#[inline]
pub fn gelu_backward<T: Element>(x: T, grad: T) -> T {
    let k = sqrt_2_over_pi::<T>();
    let c = T::of(GELU_COEFF);
    let t = (k * (x + c * x * x * x)).tanh();
    let half = T::of(0.5);
    let d = half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x);
    d * grad
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    Gelu,
    /// Used to linearize a network for receptive-field measurement.
    Identity,
}

/// Pointwise activation layer.
#[derive(Debug, Clone)]
pub struct Activation<T> {
    pub kind: ActivationKind,
    input: Option<Tensor4<T>>,
}

impl<T: Element> Activation<T> {
    pub fn gelu() -> Self {
        Self {
            kind: ActivationKind::Gelu,
            input: None,
        }
    }
}

impl<T: Element> Module<T> for Activation<T> {
    fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.input = Some(x.clone());
        Ok(match self.kind {
            ActivationKind::Gelu => x.map(gelu),
            ActivationKind::Identity => x.clone(),
        })
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let x = self
            .input
            .as_ref()
            .ok_or_else(|| Error::State("activation backward called before forward".into()))?;
        match self.kind {
            ActivationKind::Gelu => x.zip_with(grad_out, gelu_backward),
            ActivationKind::Identity => {
                x.check_same_shape(grad_out)?;
                Ok(grad_out.clone())
            }
        }
    }

    fn visit_params(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &[T])) {}

    fn visit_params_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(ParamMut<'_, T>)) {}
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        // 0.5·3·(1 + tanh(3.3569437)) = 2.9963626
        let inner: f64 = (2.0 / std::f64::consts::PI).sqrt() * (3.0 + 0.044715 * 27.0);
        assert!((inner - 3.3569437).abs() < 1e-6);
        assert!((gelu(3.0f64) - 2.99636).abs() < 5e-6, "{}", gelu(3.0f64));
    }

    #[test]
    fn derivative_matches_central_differences() {
        let eps = 1e-5;
        for i in -40..=40 {
            let x = i as f64 * 0.1 + 0.013;
            let numeric = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            let analytic = gelu_backward(x, 1.0);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel <= 1e-6, "x={x} rel={rel}");
        }
    }
}
