use crate::blocks::{build_block, init_conv, linearize_bn, BlockInstance, BlockSpec};
use crate::error::{Error, Result};
use crate::layers::{
    avg_pool, avg_pool_backward, join, Activation, ActivationKind, BatchNorm2d, Conv2d, Mode, Module, ParamMut,
};
use crate::tensor::{Element, Shape4, SplitMix64, Tensor4};

use super::config::{Head, ModelConfig};

/// 3×3 stride-2 convolution + BN + GELU: the stem and every stage's
/// downsample.
#[derive(Debug, Clone)]
pub struct Downsample<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub act: Activation<T>,
}

impl<T: Element> Downsample<T> {
    fn build(rng: &mut SplitMix64, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            conv: init_conv(rng, c_in, c_out, 3, 2, 1)?,
            bn: BatchNorm2d::new(c_out),
            act: Activation::gelu(),
        })
    }

    fn linearize(&mut self) {
        linearize_bn(&mut self.bn);
        self.act.kind = ActivationKind::Identity;
    }
}

impl<T: Element> Module<T> for Downsample<T> {
    fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let y = self.conv.forward(x)?;
        let y = self.bn.forward(&y)?;
        self.act.forward(&y)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let g = self.act.backward(grad_out)?;
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        self.conv.visit_params_mut(&join(prefix, "conv"), f);
        self.bn.visit_params_mut(&join(prefix, "bn"), f);
    }

    fn set_mode(&mut self, mode: Mode) {
        self.bn.set_mode(mode);
    }
}

#[derive(Debug, Clone)]
pub struct Stage<T> {
    pub downsample: Downsample<T>,
    pub blocks: Vec<BlockInstance<T>>,
}

/// 1×1 projection of an earlier stage's output to the final width,
/// average-pooled down to the final resolution.
#[derive(Debug, Clone)]
pub struct SkipPath<T> {
    /// Zero-based index of the source stage.
    pub source: usize,
    pub pool: usize,
    pub proj: Conv2d<T>,
    projected_shape: Option<Shape4>,
}

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct NetworkOutput<T> {
    pub output: Tensor4<T>,
    /// Raw output of every stage, before any skip merge.
    pub taps: Vec<Tensor4<T>>,
}

/// Gradients for every parameter tensor, in visitation order, plus the
/// input gradient.
#[derive(Debug, Clone)]
pub struct GradientSet<T> {
    pub input: Tensor4<T>,
    pub params: Vec<(String, Vec<T>)>,
}

impl<T> GradientSet<T> {
    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }
}

/// A built, trainable network.
#[derive(Debug, Clone)]
pub struct Network<T> {
    pub config: ModelConfig,
    pub stem: Option<Downsample<T>>,
    pub stages: Vec<Stage<T>>,
    pub skips: Vec<SkipPath<T>>,
    pub head: Option<Conv2d<T>>,
    forward_done: bool,
}

/// Builds a network from a validated config, deterministic in `seed`.
pub fn build_network<T: Element>(cfg: &ModelConfig, seed: u64) -> Result<Network<T>> {
    let cfg = cfg.clone().validated()?;
    let mut rng = SplitMix64::new(seed);
    let first = cfg.stages[0].lc_channels;
    let stem = if cfg.has_stem() {
        Some(Downsample::build(&mut rng, cfg.input_channels, first)?)
    } else {
        None
    };
    let mut prev = if cfg.has_stem() { first } else { cfg.input_channels };
    let mut stages = Vec::with_capacity(cfg.stages.len());
    for s in &cfg.stages {
        let downsample = Downsample::build(&mut rng, prev, s.lc_channels)?;
        let mut blocks = Vec::with_capacity(s.blocks);
        for b in 0..s.blocks {
            let spec = if b < s.conv_blocks() {
                BlockSpec::drivenext(s.lc_channels, s.lk_channels)
            } else {
                BlockSpec::hybrid(s.lc_channels)
            };
            blocks.push(build_block(spec, rng.next_u64())?);
        }
        stages.push(Stage { downsample, blocks });
        prev = s.lc_channels;
    }
    let last = cfg.stages.len() - 1;
    let mut skips = Vec::new();
    if cfg.has_skips() {
        for source in [1usize, 2] {
            skips.push(SkipPath {
                source,
                pool: 1 << (last - source),
                proj: init_conv(&mut rng, cfg.stages[source].lc_channels, cfg.final_width(), 1, 1, 1)?,
                projected_shape: None,
            });
        }
    }
    let head = match cfg.head {
        Head::None => None,
        Head::Heatmap => Some(init_conv(&mut rng, cfg.final_width(), 1, 1, 1, 1)?),
    };
    Ok(Network {
        config: cfg,
        stem,
        stages,
        skips,
        head,
        forward_done: false,
    })
}

impl<T: Element> Network<T> {
    pub fn check_input(&self, shape: Shape4) -> Result<()> {
        if shape.c() != self.config.input_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got input {shape}",
                self.config.input_channels
            )));
        }
        let f = self.config.reduction();
        if shape.h() % f != 0 || shape.w() % f != 0 {
            return Err(Error::Shape(format!(
                "input {}x{} is not divisible by the reduction factor {f}",
                shape.h(),
                shape.w()
            )));
        }
        Ok(())
    }

    /// Runs stem, stages, skip merge and head.
    pub fn forward(&mut self, x: &Tensor4<T>) -> Result<NetworkOutput<T>> {
        self.check_input(x.shape())?;
        let mut cur = match &mut self.stem {
            Some(stem) => stem.forward(x)?,
            None => x.clone(),
        };
        let mut taps = Vec::with_capacity(self.stages.len());
        for stage in &mut self.stages {
            cur = stage.downsample.forward(&cur)?;
            for block in &mut stage.blocks {
                cur = block.forward(&cur)?;
            }
            taps.push(cur.clone());
        }
        let mut merged = cur;
        for skip in &mut self.skips {
            let projected = skip.proj.forward(&taps[skip.source])?;
            skip.projected_shape = Some(projected.shape());
            merged.add_assign(&avg_pool(&projected, skip.pool)?)?;
        }
        let output = match &mut self.head {
            Some(head) => head.forward(&merged)?,
            None => merged,
        };
        self.forward_done = true;
        Ok(NetworkOutput { output, taps })
    }

    /// Accumulates parameter gradients for `grad_out` and returns the input
    /// gradient. Skip paths add their gradients into the stage outputs they
    /// branch from.
    pub fn backward_accumulate(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        if !self.forward_done {
            return Err(Error::State("network backward called without a cached forward".into()));
        }
        let g = match &mut self.head {
            Some(head) => head.backward(grad_out)?,
            None => grad_out.clone(),
        };
        let mut pending: Vec<Option<Tensor4<T>>> = vec![None; self.stages.len()];
        for skip in &mut self.skips {
            let shape = skip.projected_shape.expect("set by forward");
            let gp = avg_pool_backward(&g, skip.pool, shape)?;
            let gs = skip.proj.backward(&gp)?;
            accumulate(&mut pending[skip.source], gs)?;
        }
        let last = self.stages.len() - 1;
        accumulate(&mut pending[last], g)?;
        self.backward_stages(pending)
    }

    /// Backpropagates gradients injected at stage outputs (raw taps) down
    /// to the input. Stages above the highest injection are skipped.
    pub fn backward_stages(&mut self, mut pending: Vec<Option<Tensor4<T>>>) -> Result<Tensor4<T>> {
        if !self.forward_done {
            return Err(Error::State("network backward called without a cached forward".into()));
        }
        if pending.len() != self.stages.len() {
            return Err(Error::Shape("one gradient slot per stage is required".into()));
        }
        let top = pending
            .iter()
            .rposition(Option::is_some)
            .ok_or_else(|| Error::State("no gradient to backpropagate".into()))?;
        let mut carry: Option<Tensor4<T>> = None;
        for i in (0..=top).rev() {
            let mut g = match (carry.take(), pending[i].take()) {
                (Some(mut a), Some(b)) => {
                    a.add_assign(&b)?;
                    a
                }
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => unreachable!("top stage has a gradient"),
            };
            let stage = &mut self.stages[i];
            for block in stage.blocks.iter_mut().rev() {
                g = block.backward(&g)?;
            }
            carry = Some(stage.downsample.backward(&g)?);
        }
        let g = carry.expect("at least one stage ran");
        match &mut self.stem {
            Some(stem) => stem.backward(&g),
            None => Ok(g),
        }
    }

    /// Zeroes gradients, backpropagates `grad_out` and collects the
    /// gradient of every parameter.
    pub fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<GradientSet<T>> {
        self.zero_grad();
        let input = self.backward_accumulate(grad_out)?;
        let mut params = Vec::new();
        self.visit_params_mut("", &mut |p| params.push((p.name.to_string(), p.grad.to_vec())));
        Ok(GradientSet { input, params })
    }

    /// Trainable parameter count, by enumerating every parameter tensor.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        Module::visit_params(self, "", &mut |_, v| total += v.len());
        total
    }

    /// Makes the network linear in its input apart from attention: GELU
    /// becomes identity and BN runs in eval mode with zero mean, unit
    /// variance.
    pub fn linearize(&mut self) {
        if let Some(stem) = &mut self.stem {
            stem.linearize();
        }
        for stage in &mut self.stages {
            stage.downsample.linearize();
            for block in &mut stage.blocks {
                block.linearize();
            }
        }
    }

    /// Number of stride-2 convolutions along the main path.
    pub fn stride2_layers(&self) -> usize {
        usize::from(self.stem.is_some()) + self.stages.len()
    }
}

impl<T: Element> Module<T> for Network<T> {
    fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        Network::forward(self, x).map(|o| o.output)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.backward_accumulate(grad_out)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        if let Some(stem) = &self.stem {
            stem.visit_params(&join(prefix, "stem"), f);
        }
        for (i, stage) in self.stages.iter().enumerate() {
            let sp = join(prefix, &format!("stage{}", i + 1));
            stage.downsample.visit_params(&join(&sp, "downsample"), f);
            for (j, block) in stage.blocks.iter().enumerate() {
                block.visit_params(&join(&sp, &format!("block{}", j + 1)), f);
            }
        }
        for skip in &self.skips {
            skip.proj.visit_params(&join(prefix, &format!("skip{}", skip.source + 1)), f);
        }
        if let Some(head) = &self.head {
            head.visit_params(&join(prefix, "head"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        if let Some(stem) = &mut self.stem {
            stem.visit_params_mut(&join(prefix, "stem"), f);
        }
        for (i, stage) in self.stages.iter_mut().enumerate() {
            let sp = join(prefix, &format!("stage{}", i + 1));
            stage.downsample.visit_params_mut(&join(&sp, "downsample"), f);
            for (j, block) in stage.blocks.iter_mut().enumerate() {
                block.visit_params_mut(&join(&sp, &format!("block{}", j + 1)), f);
            }
        }
        for skip in &mut self.skips {
            skip.proj.visit_params_mut(&join(prefix, &format!("skip{}", skip.source + 1)), f);
        }
        if let Some(head) = &mut self.head {
            head.visit_params_mut(&join(prefix, "head"), f);
        }
    }

    fn set_mode(&mut self, mode: Mode) {
        if let Some(stem) = &mut self.stem {
            stem.set_mode(mode);
        }
        for stage in &mut self.stages {
            stage.downsample.set_mode(mode);
            for block in &mut stage.blocks {
                block.set_mode(mode);
            }
        }
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor4<T>>, g: Tensor4<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{variant_preset, StageConfig};
    use crate::tensor::{tensor_from_seed, Distribution};

    fn toy_config() -> ModelConfig {
        ModelConfig {
            name: "toy".into(),
            stages: vec![
                StageConfig::new(1, 4, 4),
                StageConfig::new(1, 4, 8),
                StageConfig::new(1, 4, 8),
                StageConfig::new(1, 4, 4),
            ],
            input_channels: 3,
            full_resolution: false,
            head: Head::None,
        }
    }

    fn params(net: &Network<f64>) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        Module::visit_params(net, "", &mut |n, v| out.push((n.to_string(), v.to_vec())));
        out
    }

    #[test]
    fn deterministic_build() {
        let cfg = toy_config();
        let a = build_network::<f64>(&cfg, 3).unwrap();
        let b = build_network::<f64>(&cfg, 3).unwrap();
        assert_eq!(params(&a), params(&b));
    }

    #[test]
    fn stride_two_layer_count() {
        let mut cfg = variant_preset("small").unwrap().scaled_widths(16);
        assert_eq!(build_network::<f32>(&cfg, 0).unwrap().stride2_layers(), 5);
        cfg.full_resolution = true;
        assert_eq!(build_network::<f32>(&cfg, 0).unwrap().stride2_layers(), 4);
    }

    #[test]
    fn skips_only_for_four_stages() {
        let mut cfg = toy_config();
        assert_eq!(build_network::<f32>(&cfg, 0).unwrap().skips.len(), 2);
        cfg.stages.pop();
        assert!(build_network::<f32>(&cfg, 0).unwrap().skips.is_empty());
    }

    #[test]
    fn indivisible_input_names_the_factor() {
        let mut net = build_network::<f64>(&toy_config(), 0).unwrap();
        let x = Tensor4::zeros(Shape4::new(1, 3, 48, 40).unwrap());
        let err = net.forward(&x).unwrap_err();
        assert!(err.to_string().contains("32"), "{err}");
    }

    #[test]
    fn zeroed_skips_leave_stage_four_output() {
        let mut net = build_network::<f64>(&toy_config(), 1).unwrap();
        for s in &mut net.skips {
            s.proj.params.weight.data_mut().fill(0.0);
        }
        let x = tensor_from_seed(Shape4::new(2, 3, 64, 64).unwrap(), 2, Distribution::Uniform).unwrap();
        let out = net.forward(&x).unwrap();
        assert_eq!(out.output, out.taps[3]);
    }

    #[test]
    fn backward_needs_forward() {
        let mut net = build_network::<f64>(&toy_config(), 1).unwrap();
        let g = Tensor4::zeros(Shape4::new(1, 4, 1, 1).unwrap());
        assert!(matches!(net.backward(&g), Err(Error::State(_))));
    }

    #[test]
    fn zero_grad_out_zero_gradients() {
        let mut net = build_network::<f64>(&toy_config(), 1).unwrap();
        let x = tensor_from_seed(Shape4::new(2, 3, 32, 32).unwrap(), 2, Distribution::Uniform).unwrap();
        let out = net.forward(&x).unwrap();
        let g = net.backward(&Tensor4::zeros(out.output.shape())).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.params.iter().all(|(_, v)| v.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn skip_projection_receives_gradient() {
        let mut net = build_network::<f64>(&toy_config(), 1).unwrap();
        let x = tensor_from_seed(Shape4::new(2, 3, 32, 32).unwrap(), 2, Distribution::Uniform).unwrap();
        let out = net.forward(&x).unwrap();
        let go = tensor_from_seed(out.output.shape(), 3, Distribution::Uniform).unwrap();
        let g = net.backward(&go).unwrap();
        assert!(g.get("skip2.weight").unwrap().iter().any(|&v| v != 0.0));
        assert!(g.get("skip3.bias").unwrap().iter().any(|&v| v != 0.0));
    }
}
