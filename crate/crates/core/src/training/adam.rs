use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Module;
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_max: f64,
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_max: 1e-3,
            warmup_steps: 50,
        }
    }
}

impl AdamConfig {
    /// Linear warmup: `lr_max · min(1, (t+1)/warmup_steps)`.
    pub fn lr_at(&self, t: u64) -> f64 {
        let w = self.warmup_steps.max(1) as f64;
        self.lr_max * ((t + 1) as f64 / w).min(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps >= 0.0
            && self.lr_max > 0.0
            && self.warmup_steps >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// One bias-corrected Adam update of a single tensor at step `t` (0-based).
/// Returns false, leaving everything untouched, if any gradient is not
/// finite.
pub fn adam_update<T: Element>(
    cfg: &AdamConfig,
    t: u64,
    lr: f64,
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
) -> bool {
    if grad.iter().any(|g| !g.as_f64().is_finite()) {
        return false;
    }
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let bc1 = T::of(1.0 - cfg.beta1.powf((t + 1) as f64));
    let bc2 = T::of(1.0 - cfg.beta2.powf((t + 1) as f64));
    let (lr, eps) = (T::of(lr), T::of(cfg.eps));
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    true
}

/// Optimizer state for every parameter tensor of one module, matched by
/// visitation order.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// Applies one update to every parameter of `module` from its
    /// accumulated gradients. Returns the names of tensors skipped for
    /// non-finite gradients.
    pub fn step(&mut self, module: &mut dyn Module<T>) -> Result<Vec<String>> {
        let t = self.step;
        let lr = self.config.lr_at(t);
        let cfg = self.config;
        let mut idx = 0;
        let mut skipped = Vec::new();
        let mut mismatch = None;
        let (ms, vs) = (&mut self.m, &mut self.v);
        module.visit_params_mut("", &mut |p| {
            if ms.len() <= idx {
                ms.push(vec![T::zero(); p.value.len()]);
                vs.push(vec![T::zero(); p.value.len()]);
            }
            if ms[idx].len() != p.value.len() || p.grad.len() != p.value.len() {
                mismatch.get_or_insert_with(|| p.name.to_string());
            } else if !adam_update(&cfg, t, lr, p.value, p.grad, &mut ms[idx], &mut vs[idx]) {
                skipped.push(p.name.to_string());
            }
            idx += 1;
        });
        if let Some(name) = mismatch {
            return Err(Error::State(format!("optimizer state does not match parameter {name}")));
        }
        self.step += 1;
        Ok(skipped)
    }
}
