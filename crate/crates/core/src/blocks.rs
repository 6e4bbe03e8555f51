//! Residual blocks: the ConvNeXt baseline, the DriveNeXt LK/LC bottleneck
//! and the DriveNeXt-Hybrid depthwise-conv + self-attention block.
//!
//! Wiring (all blocks preserve shape):
//!
//! * DriveNeXt: `y = GELU(x + BN₂(Conv1×1[lk→W](GELU(BN₁(Conv3×3[W→lk](x))))))`
//! * Hybrid: `u = BN(DWConv3×3(x)); y = u + MHSA(u)`
//! * ConvNeXt: `y = x + Conv1×1[4W→W](GELU(Conv1×1[W→4W](LN(DWConv7×7(x)))))`

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    default_heads, join, Activation, ActivationKind, AttentionParams, BatchNorm2d, Conv2d, ConvParams,
    LayerNormChannel, Mode, Module, MultiHeadAttention, ParamMut,
};
use crate::tensor::{seeded_values, Distribution, Element, Shape4, SplitMix64, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    #[serde(rename = "convnext")]
    ConvNext,
    #[serde(rename = "drivenext")]
    DriveNext,
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    /// Stage width (LC channels).
    pub width: usize,
    /// Bottleneck width of the 3×3 LK convolution.
    pub lk_channels: usize,
    /// Attention heads; only meaningful for hybrid blocks.
    pub heads: usize,
}

impl BlockSpec {
    pub fn drivenext(width: usize, lk_channels: usize) -> Self {
        Self {
            kind: BlockKind::DriveNext,
            width,
            lk_channels,
            heads: 1,
        }
    }

    pub fn hybrid(width: usize) -> Self {
        Self {
            kind: BlockKind::Hybrid,
            width,
            lk_channels: width,
            heads: default_heads(width),
        }
    }

    pub fn convnext(width: usize) -> Self {
        Self {
            kind: BlockKind::ConvNext,
            width,
            lk_channels: width,
            heads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.lk_channels == 0 {
            return Err(Error::Config("block widths must be positive".into()));
        }
        match self.kind {
            BlockKind::DriveNext if self.lk_channels > self.width => Err(Error::Config(format!(
                "bottleneck width {} exceeds block width {}",
                self.lk_channels, self.width
            ))),
            BlockKind::Hybrid if self.heads == 0 || self.width % self.heads != 0 => Err(Error::Config(format!(
                "hybrid block width {} is not divisible by {} heads",
                self.width, self.heads
            ))),
            _ => Ok(()),
        }
    }
}

/// He-style initialization: gaussian weights with σ = √(2 / fan_in) where
/// fan_in = k²·c_in/groups, zero bias.
pub(crate) fn init_conv<T: Element>(
    rng: &mut SplitMix64,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    groups: usize,
) -> Result<Conv2d<T>> {
    let mut p = ConvParams::zeros(c_in, c_out, kernel, stride, groups)?;
    let fan_in = kernel * kernel * (c_in / groups);
    let sigma = (2.0 / fan_in as f64).sqrt();
    let values = seeded_values(p.weight.shape().len(), rng.next_u64(), Distribution::Gaussian { sigma })?;
    p.weight.data_mut().copy_from_slice(&values);
    Ok(Conv2d::new(p))
}

fn init_attention<T: Element>(rng: &mut SplitMix64, dim: usize, heads: usize) -> Result<MultiHeadAttention<T>> {
    let mut p = AttentionParams::zeros(dim, heads)?;
    let sigma = 1.0 / (dim as f64).sqrt();
    for w in [&mut p.w_q, &mut p.w_k, &mut p.w_v, &mut p.w_o] {
        let values = seeded_values(dim * dim, rng.next_u64(), Distribution::Gaussian { sigma })?;
        w.data_mut().copy_from_slice(&values);
    }
    Ok(MultiHeadAttention::new(p))
}

pub(crate) fn linearize_bn<T: Element>(bn: &mut BatchNorm2d<T>) {
    let c = bn.state.channels();
    bn.state
        .set_running(vec![T::zero(); c], vec![T::one(); c])
        .expect("running statistics sized from the layer");
    bn.set_mode(Mode::Eval);
}

#[derive(Debug, Clone)]
pub struct DriveNextBlock<T> {
    pub lk_conv: Conv2d<T>,
    pub lk_bn: BatchNorm2d<T>,
    pub lk_act: Activation<T>,
    pub lc_conv: Conv2d<T>,
    pub lc_bn: BatchNorm2d<T>,
    pub out_act: Activation<T>,
}

impl<T: Element> DriveNextBlock<T> {
    fn build(spec: &BlockSpec, rng: &mut SplitMix64) -> Result<Self> {
        Ok(Self {
            lk_conv: init_conv(rng, spec.width, spec.lk_channels, 3, 1, 1)?,
            lk_bn: BatchNorm2d::new(spec.lk_channels),
            lk_act: Activation::gelu(),
            lc_conv: init_conv(rng, spec.lk_channels, spec.width, 1, 1, 1)?,
            lc_bn: BatchNorm2d::new(spec.width),
            out_act: Activation::gelu(),
        })
    }

    fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let a = self.lk_conv.forward(x)?;
        let a = self.lk_bn.forward(&a)?;
        let a = self.lk_act.forward(&a)?;
        let b = self.lc_conv.forward(&a)?;
        let mut b = self.lc_bn.forward(&b)?;
        b.add_assign(x)?;
        self.out_act.forward(&b)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let g = self.out_act.backward(grad_out)?;
        let gb = self.lc_bn.backward(&g)?;
        let gb = self.lc_conv.backward(&gb)?;
        let gb = self.lk_act.backward(&gb)?;
        let gb = self.lk_bn.backward(&gb)?;
        let mut gx = self.lk_conv.backward(&gb)?;
        gx.add_assign(&g)?;
        Ok(gx)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        self.lk_conv.visit_params(&join(prefix, "lk_conv"), f);
        self.lk_bn.visit_params(&join(prefix, "lk_bn"), f);
        self.lc_conv.visit_params(&join(prefix, "lc_conv"), f);
        self.lc_bn.visit_params(&join(prefix, "lc_bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        self.lk_conv.visit_params_mut(&join(prefix, "lk_conv"), f);
        self.lk_bn.visit_params_mut(&join(prefix, "lk_bn"), f);
        self.lc_conv.visit_params_mut(&join(prefix, "lc_conv"), f);
        self.lc_bn.visit_params_mut(&join(prefix, "lc_bn"), f);
    }

    fn batch_norms(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        vec![&mut self.lk_bn, &mut self.lc_bn]
    }

    fn activations(&mut self) -> Vec<&mut Activation<T>> {
        vec![&mut self.lk_act, &mut self.out_act]
    }
}

#[derive(Debug, Clone)]
pub struct HybridBlock<T> {
    pub dw_conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub attn: MultiHeadAttention<T>,
}

impl<T: Element> HybridBlock<T> {
    fn build(spec: &BlockSpec, rng: &mut SplitMix64) -> Result<Self> {
        Ok(Self {
            dw_conv: init_conv(rng, spec.width, spec.width, 3, 1, spec.width)?,
            bn: BatchNorm2d::new(spec.width),
            attn: init_attention(rng, spec.width, spec.heads)?,
        })
    }

    fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let u = self.dw_conv.forward(x)?;
        let mut u = self.bn.forward(&u)?;
        let a = self.attn.forward(&u)?;
        u.add_assign(&a)?;
        Ok(u)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut gu = self.attn.backward(grad_out)?;
        gu.add_assign(grad_out)?;
        let g = self.bn.backward(&gu)?;
        self.dw_conv.backward(&g)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        self.dw_conv.visit_params(&join(prefix, "dw_conv"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
        self.attn.visit_params(&join(prefix, "attn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        self.dw_conv.visit_params_mut(&join(prefix, "dw_conv"), f);
        self.bn.visit_params_mut(&join(prefix, "bn"), f);
        self.attn.visit_params_mut(&join(prefix, "attn"), f);
    }
}

#[derive(Debug, Clone)]
pub struct ConvNextBlock<T> {
    pub dw_conv: Conv2d<T>,
    pub norm: LayerNormChannel<T>,
    pub pw_expand: Conv2d<T>,
    pub act: Activation<T>,
    pub pw_project: Conv2d<T>,
}

impl<T: Element> ConvNextBlock<T> {
    fn build(spec: &BlockSpec, rng: &mut SplitMix64) -> Result<Self> {
        let w = spec.width;
        Ok(Self {
            dw_conv: init_conv(rng, w, w, 7, 1, w)?,
            norm: LayerNormChannel::new(w),
            pw_expand: init_conv(rng, w, 4 * w, 1, 1, 1)?,
            act: Activation::gelu(),
            pw_project: init_conv(rng, 4 * w, w, 1, 1, 1)?,
        })
    }

    fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let a = self.dw_conv.forward(x)?;
        let a = self.norm.forward(&a)?;
        let a = self.pw_expand.forward(&a)?;
        let a = self.act.forward(&a)?;
        let mut y = self.pw_project.forward(&a)?;
        y.add_assign(x)?;
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let g = self.pw_project.backward(grad_out)?;
        let g = self.act.backward(&g)?;
        let g = self.pw_expand.backward(&g)?;
        let g = self.norm.backward(&g)?;
        let mut gx = self.dw_conv.backward(&g)?;
        gx.add_assign(grad_out)?;
        Ok(gx)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        self.dw_conv.visit_params(&join(prefix, "dw_conv"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.pw_expand.visit_params(&join(prefix, "pw_expand"), f);
        self.pw_project.visit_params(&join(prefix, "pw_project"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        self.dw_conv.visit_params_mut(&join(prefix, "dw_conv"), f);
        self.norm.visit_params_mut(&join(prefix, "norm"), f);
        self.pw_expand.visit_params_mut(&join(prefix, "pw_expand"), f);
        self.pw_project.visit_params_mut(&join(prefix, "pw_project"), f);
    }
}

#[derive(Debug, Clone)]
pub enum BlockBody<T> {
    ConvNext(ConvNextBlock<T>),
    DriveNext(DriveNextBlock<T>),
    Hybrid(HybridBlock<T>),
}

/// A built block: its spec plus initialized parameters.
#[derive(Debug, Clone)]
pub struct BlockInstance<T> {
    pub spec: BlockSpec,
    pub body: BlockBody<T>,
    input_shape: Option<Shape4>,
}

/// Builds a block deterministically from `seed`.
pub fn build_block<T: Element>(spec: BlockSpec, seed: u64) -> Result<BlockInstance<T>> {
    spec.validate()?;
    let mut rng = SplitMix64::new(seed);
    let body = match spec.kind {
        BlockKind::ConvNext => BlockBody::ConvNext(ConvNextBlock::build(&spec, &mut rng)?),
        BlockKind::DriveNext => BlockBody::DriveNext(DriveNextBlock::build(&spec, &mut rng)?),
        BlockKind::Hybrid => BlockBody::Hybrid(HybridBlock::build(&spec, &mut rng)?),
    };
    Ok(BlockInstance {
        spec,
        body,
        input_shape: None,
    })
}

impl<T: Element> BlockInstance<T> {
    /// Replaces GELU by identity and puts every BN in eval mode with zero
    /// mean and unit variance, making the block linear in its input
    /// (hybrid blocks keep their attention).
    pub fn linearize(&mut self) {
        match &mut self.body {
            BlockBody::DriveNext(b) => {
                b.batch_norms().into_iter().for_each(linearize_bn);
                b.activations().into_iter().for_each(|a| a.kind = ActivationKind::Identity);
            }
            BlockBody::Hybrid(b) => linearize_bn(&mut b.bn),
            BlockBody::ConvNext(b) => b.act.kind = ActivationKind::Identity,
        }
    }

    pub fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit_params("", &mut |_, v| total += v.len());
        total
    }
}

impl<T: Element> Module<T> for BlockInstance<T> {
    fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        if x.shape().c() != self.spec.width {
            return Err(Error::Shape(format!(
                "block of width {} got input {}",
                self.spec.width,
                x.shape()
            )));
        }
        self.input_shape = Some(x.shape());
        match &mut self.body {
            BlockBody::ConvNext(b) => b.forward(x),
            BlockBody::DriveNext(b) => b.forward(x),
            BlockBody::Hybrid(b) => b.forward(x),
        }
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        match self.input_shape {
            Some(s) if s == grad_out.shape() => {}
            Some(s) => return Err(Error::ShapeMismatch { left: grad_out.shape(), right: s }),
            None => return Err(Error::State("block backward called before forward".into())),
        }
        match &mut self.body {
            BlockBody::ConvNext(b) => b.backward(grad_out),
            BlockBody::DriveNext(b) => b.backward(grad_out),
            BlockBody::Hybrid(b) => b.backward(grad_out),
        }
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        match &self.body {
            BlockBody::ConvNext(b) => b.visit(prefix, f),
            BlockBody::DriveNext(b) => b.visit(prefix, f),
            BlockBody::Hybrid(b) => b.visit(prefix, f),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        match &mut self.body {
            BlockBody::ConvNext(b) => b.visit_mut(prefix, f),
            BlockBody::DriveNext(b) => b.visit_mut(prefix, f),
            BlockBody::Hybrid(b) => b.visit_mut(prefix, f),
        }
    }

    fn set_mode(&mut self, mode: Mode) {
        match &mut self.body {
            BlockBody::ConvNext(_) => {}
            BlockBody::DriveNext(b) => b.batch_norms().into_iter().for_each(|bn| bn.set_mode(mode)),
            BlockBody::Hybrid(b) => b.bn.set_mode(mode),
        }
    }
}
