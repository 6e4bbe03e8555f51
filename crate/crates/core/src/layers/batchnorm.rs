use crate::error::{Error, Result};
use crate::tensor::{channel_moments, Element, Tensor4};

use super::{join, Mode, Module, ParamMut};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub epsilon: f64,
    pub mode: Mode,
    /// False until a train-mode pass or [`BatchNormState::set_running`]
    /// has populated the running statistics.
    pub tracked: bool,
}

impl<T: Element> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
            mode: Mode::Train,
            tracked: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn set_running(&mut self, mean: Vec<T>, var: Vec<T>) -> Result<()> {
        if mean.len() != self.channels() || var.len() != self.channels() {
            return Err(Error::Shape("running statistics length must equal channel count".into()));
        }
        if var.iter().any(|v| *v < T::zero()) {
            return Err(Error::Config("running variance must be non-negative".into()));
        }
        self.running_mean = mean;
        self.running_var = var;
        self.tracked = true;
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Cache<T> {
    normalized: Tensor4<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

/// Batch normalization over `(n, h, w)` per channel.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub state: BatchNormState<T>,
    grad_gamma: Vec<T>,
    grad_beta: Vec<T>,
    cache: Option<Cache<T>>,
}

impl<T: Element> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self::from_state(BatchNormState::new(channels))
    }

    pub fn from_state(state: BatchNormState<T>) -> Self {
        let c = state.channels();
        Self {
            state,
            grad_gamma: vec![T::zero(); c],
            grad_beta: vec![T::zero(); c],
            cache: None,
        }
    }
}

impl<T: Element> Module<T> for BatchNorm2d<T> {
    fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let s = x.shape();
        let c = self.state.channels();
        if s.c() != c {
            return Err(Error::Shape(format!(
                "batch norm over {c} channels got input {s}"
            )));
        }
        let eps = T::of(self.state.epsilon);
        let (mean, inv_std) = match self.state.mode {
            Mode::Train => {
                let (mean, var) = channel_moments(x);
                let m = T::of(self.state.momentum);
                let keep = T::one() - m;
                for j in 0..c {
                    self.state.running_mean[j] = keep * self.state.running_mean[j] + m * mean[j];
                    self.state.running_var[j] = keep * self.state.running_var[j] + m * var[j];
                }
                self.state.tracked = true;
                let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv)
            }
            Mode::Eval => {
                if !self.state.tracked {
                    return Err(Error::State(
                        "batch norm in eval mode before running statistics were initialized".into(),
                    ));
                }
                let inv = self.state.running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (self.state.running_mean.clone(), inv)
            }
        };
        let mut normalized = x.clone();
        let mut out = Tensor4::zeros(s);
        for n in 0..s.n() {
            for j in 0..c {
                let (m, inv, g, b) = (mean[j], inv_std[j], self.state.gamma[j], self.state.beta[j]);
                for (xh, y) in normalized.plane_mut(n, j).iter_mut().zip(out.plane_mut(n, j)) {
                    *xh = (*xh - m) * inv;
                    *y = g * *xh + b;
                }
            }
        }
        self.cache = Some(Cache {
            normalized,
            inv_std,
            mode: self.state.mode,
        });
        Ok(out)
    }

    /// Exact gradient; in train mode the batch mean and variance are
    /// differentiated through, not treated as constants.
    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("batch norm backward called without a cached forward".into()))?;
        cache.normalized.check_same_shape(grad_out)?;
        let s = grad_out.shape();
        let count = T::of((s.n() * s.plane()) as f64);
        let mut grad_in = Tensor4::zeros(s);
        for j in 0..s.c() {
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for n in 0..s.n() {
                for (&g, &xh) in grad_out.plane(n, j).iter().zip(cache.normalized.plane(n, j)) {
                    sum_g += g;
                    sum_gx += g * xh;
                }
            }
            self.grad_beta[j] += sum_g;
            self.grad_gamma[j] += sum_gx;
            let scale = self.state.gamma[j] * cache.inv_std[j];
            for n in 0..s.n() {
                let xh = cache.normalized.plane(n, j);
                let g = grad_out.plane(n, j);
                let dst = grad_in.plane_mut(n, j);
                match cache.mode {
                    Mode::Train => {
                        for i in 0..dst.len() {
                            dst[i] = scale / count * (count * g[i] - sum_g - xh[i] * sum_gx);
                        }
                    }
                    Mode::Eval => {
                        for i in 0..dst.len() {
                            dst[i] = scale * g[i];
                        }
                    }
                }
            }
        }
        Ok(grad_in)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        f(&join(prefix, "gamma"), &self.state.gamma);
        f(&join(prefix, "beta"), &self.state.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        f(ParamMut {
            name: &join(prefix, "gamma"),
            value: &mut self.state.gamma,
            grad: &mut self.grad_gamma,
        });
        f(ParamMut {
            name: &join(prefix, "beta"),
            value: &mut self.state.beta,
            grad: &mut self.grad_beta,
        });
    }

    fn set_mode(&mut self, mode: Mode) {
        self.state.mode = mode;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{tensor_from_seed, Distribution, Shape4};

    fn input() -> Tensor4<f64> {
        tensor_from_seed(Shape4::new(3, 2, 3, 3).unwrap(), 21, Distribution::Uniform).unwrap()
    }

    #[test]
    fn constant_input_maps_to_beta() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.state.beta = vec![0.25, -0.5];
        let x = Tensor4::full(Shape4::new(2, 2, 2, 2).unwrap(), 3.0);
        let y = bn.forward(&x).unwrap();
        for n in 0..2 {
            assert!(y.plane(n, 0).iter().all(|&v| v == 0.25));
            assert!(y.plane(n, 1).iter().all(|&v| v == -0.5));
        }
    }

    #[test]
    fn train_mode_standardizes() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        let x = input();
        let y = bn.forward(&x).unwrap();
        let (m, v) = channel_moments(&y);
        let (_, var_x) = channel_moments(&x);
        for j in 0..2 {
            assert!(m[j].abs() < 1e-12);
            let expect = 1.0 / (1.0 + BN_EPSILON / var_x[j]);
            assert!((v[j] - expect).abs() < 1e-12 && v[j] <= 1.0);
        }
        // applying again to its own output keeps mean 0
        let mut bn2 = BatchNorm2d::<f64>::new(2);
        let (m2, _) = channel_moments(&bn2.forward(&y).unwrap());
        assert!(m2.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn running_stats_update_and_eval_equivalence() {
        let x = input();
        let (mean, var) = channel_moments(&x);
        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.state.gamma = vec![1.5, 0.5];
        bn.state.beta = vec![0.1, -0.2];
        let train = bn.forward(&x).unwrap();
        for j in 0..2 {
            assert!((bn.state.running_mean[j] - 0.1 * mean[j]).abs() < 1e-15);
            assert!((bn.state.running_var[j] - (0.9 + 0.1 * var[j])).abs() < 1e-15);
        }
        bn.state.set_running(mean, var).unwrap();
        bn.set_mode(Mode::Eval);
        let before = bn.state.clone();
        let eval = bn.forward(&x).unwrap();
        assert_eq!(train, eval);
        assert_eq!(bn.state, before);
    }

    #[test]
    fn eval_before_tracking_is_state_error() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.set_mode(Mode::Eval);
        assert!(matches!(bn.forward(&input()), Err(Error::State(_))));
    }

    #[test]
    fn backward_requires_cache() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        assert!(matches!(bn.backward(&input()), Err(Error::State(_))));
    }

    #[test]
    fn backward_projection_property() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        let x = input();
        bn.forward(&x).unwrap();
        let go = tensor_from_seed(x.shape(), 22, Distribution::Uniform).unwrap();
        let gi = bn.backward(&go).unwrap();
        for j in 0..2 {
            let s: f64 = (0..3).flat_map(|n| gi.plane(n, j).to_vec()).sum();
            assert!(s.abs() < 1e-12, "channel {j} sum {s}");
        }
        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.forward(&x).unwrap();
        let gi = bn.backward(&Tensor4::zeros(x.shape())).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
    }
}
