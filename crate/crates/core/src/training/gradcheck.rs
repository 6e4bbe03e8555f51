use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Module;
use crate::tensor::{tensor_from_seed, Distribution, SplitMix64, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Tensors up to this size are checked at every coordinate.
    pub exhaustive_limit: usize,
    /// Coordinates sampled from larger tensors.
    pub sample: usize,
    /// Seeds the loss weights and the coordinate sample.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-4,
            exhaustive_limit: 1000,
            sample: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub len: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(move |t| !(t.max_rel_error <= self.tolerance))
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Which coordinates of a `len`-element tensor to probe.
pub fn probe_indices(len: usize, opts: &GradCheckOptions, salt: u64) -> Vec<usize> {
    if len <= opts.exhaustive_limit || opts.sample >= len {
        return (0..len).collect();
    }
    // partial Fisher-Yates: a seeded sample without repeats
    let mut rng = SplitMix64::new(opts.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..opts.sample {
        let j = rng.range_inclusive(i, len - 1);
        idx.swap(i, j);
    }
    let mut out = idx[..opts.sample].to_vec();
    out.sort_unstable();
    out
}

/// `(L(hi) − L(lo)) / 2ε` for `L = Σ wᵢ·yᵢ`, differencing each output before
/// weighting so the large common part of the loss cancels exactly.
fn central_difference(hi: &Tensor4<f64>, lo: &Tensor4<f64>, w: &Tensor4<f64>, eps: f64) -> f64 {
    let s: f64 = hi
        .data()
        .iter()
        .zip(lo.data())
        .zip(w.data())
        .map(|((a, b), c)| (a - b) * c)
        .sum();
    s / (2.0 * eps)
}

fn with_param<R>(m: &mut dyn Module<f64>, tensor: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    let mut f = Some(f);
    let mut out = None;
    let mut i = 0;
    m.visit_params_mut("", &mut |p| {
        if i == tensor {
            out = Some((f.take().expect("called once"))(p.value));
        }
        i += 1;
    });
    out.expect("tensor index in range")
}

/// Central-difference check of the input gradient and every parameter
/// gradient of `m` at `x`.
///
/// The scalar loss is `Σ wᵢ·yᵢ` with seeded uniform weights `w`. With
/// `w = 1` it would be the plain output sum, which batch normalization in
/// training mode makes identically constant.
pub fn grad_check(m: &mut dyn Module<f64>, x: &Tensor4<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if !(opts.epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {}", opts.epsilon)));
    }
    let y = m.forward(x)?;
    let w = tensor_from_seed(y.shape(), opts.seed, Distribution::Uniform)?;
    m.zero_grad();
    let y = m.forward(x)?;
    let grad_x = m.backward(&w)?;
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    m.visit_params_mut("", &mut |p| analytic.push((p.name.to_string(), p.grad.to_vec())));
    drop(y);

    let eps = opts.epsilon;

    let mut tensors = Vec::new();
    let mut xp = x.clone();
    let mut check = TensorCheck {
        name: "input".into(),
        len: x.shape().len(),
        checked: 0,
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in probe_indices(check.len, opts, 0) {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + eps;
        let hi = m.forward(&xp)?;
        xp.data_mut()[i] = orig - eps;
        let lo = m.forward(&xp)?;
        xp.data_mut()[i] = orig;
        record(&mut check, i, grad_x.data()[i], central_difference(&hi, &lo, &w, eps));
    }
    tensors.push(check);

    for (t, (name, grad)) in analytic.iter().enumerate() {
        let mut check = TensorCheck {
            name: name.clone(),
            len: grad.len(),
            checked: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in probe_indices(grad.len(), opts, t as u64 + 1) {
            let orig = with_param(m, t, |v| {
                let o = v[i];
                v[i] = o + eps;
                o
            });
            let hi = m.forward(x)?;
            with_param(m, t, |v| v[i] = orig - eps);
            let lo = m.forward(x)?;
            with_param(m, t, |v| v[i] = orig);
            record(&mut check, i, grad[i], central_difference(&hi, &lo, &w, eps));
        }
        tensors.push(check);
    }
    let pass = tensors.iter().all(|t| t.max_rel_error <= opts.tolerance);
    Ok(GradCheckReport {
        epsilon: eps,
        tolerance: opts.tolerance,
        tensors,
        pass,
    })
}

fn record(check: &mut TensorCheck, i: usize, analytic: f64, numeric: f64) {
    let rel = relative_error(analytic, numeric);
    // NaN compares false, so it is forced in explicitly
    if check.checked == 0 || rel > check.max_rel_error || rel.is_nan() {
        check.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
        check.worst_index = i;
        check.analytic = analytic;
        check.numeric = numeric;
    }
    check.checked += 1;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Conv2d, ConvParams, ParamMut};
    use crate::tensor::Shape4;

    fn conv1x1() -> Conv2d<f64> {
        let mut p = ConvParams::zeros(3, 2, 1, 1, 1).unwrap();
        p.weight = tensor_from_seed(p.weight.shape(), 4, Distribution::Uniform).unwrap();
        Conv2d::new(p)
    }

    #[test]
    fn linear_conv_is_exact() {
        // one output channel with weights away from zero keeps every
        // gradient well above the output roundoff divided by 2ε
        let mut p = ConvParams::zeros(3, 1, 1, 1, 1).unwrap();
        p.weight.data_mut().copy_from_slice(&[0.75, -0.5, 1.0]);
        let x = tensor_from_seed(Shape4::new(2, 3, 4, 4).unwrap(), 1, Distribution::Uniform).unwrap();
        let r = grad_check(&mut Conv2d::new(p), &x, &GradCheckOptions::default()).unwrap();
        assert!(r.pass);
        assert!(r.worst().unwrap().max_rel_error <= 1e-10, "{:?}", r.worst());
        assert_eq!(r.tensors.iter().map(|t| t.name.as_str()).collect::<Vec<_>>(), ["input", "weight", "bias"]);
    }

    /// Flips the sign of the bias gradient after every backward pass.
    struct Corrupted(Conv2d<f64>);

    impl Module<f64> for Corrupted {
        fn forward(&mut self, x: &Tensor4<f64>) -> Result<Tensor4<f64>> {
            self.0.forward(x)
        }
        fn backward(&mut self, g: &Tensor4<f64>) -> Result<Tensor4<f64>> {
            let out = self.0.backward(g)?;
            self.0.visit_params_mut("", &mut |p| {
                if p.name == "bias" {
                    p.grad.iter_mut().for_each(|v| *v = -*v);
                }
            });
            Ok(out)
        }
        fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
            self.0.visit_params(prefix, f)
        }
        fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, f64>)) {
            self.0.visit_params_mut(prefix, f)
        }
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let x = tensor_from_seed(Shape4::new(1, 3, 3, 3).unwrap(), 1, Distribution::Uniform).unwrap();
        let r = grad_check(&mut Corrupted(conv1x1()), &x, &GradCheckOptions::default()).unwrap();
        assert!(!r.pass);
        let failed: Vec<&str> = r.failures().map(|t| t.name.as_str()).collect();
        assert_eq!(failed, ["bias"]);
    }

    #[test]
    fn sampling_rule() {
        let opts = GradCheckOptions::default();
        assert_eq!(probe_indices(1000, &opts, 3).len(), 1000);
        let s = probe_indices(5000, &opts, 3);
        assert_eq!(s.len(), 200);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, probe_indices(5000, &opts, 3));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-18);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }
}
