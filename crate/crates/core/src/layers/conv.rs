use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Element, Shape4, Tensor4};

use super::{join, LayerGrad, Module, ParamGrad, ParamMut};

/// "Same-at-stride" padding: output extent `ceil(input / stride)`, zero
/// padding split evenly with the odd pixel on the bottom/right.
///
/// Returns `(output extent, padding before)`.
pub fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, total / 2)
}

/// Weights of a (possibly grouped) square-kernel convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    /// `(c_out, c_in / groups, k, k)`.
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
    pub stride: usize,
    pub groups: usize,
}

impl<T: Element> ConvParams<T> {
    pub fn new(weight: Tensor4<T>, bias: Vec<T>, stride: usize, groups: usize) -> Result<Self> {
        let s = weight.shape();
        if s.h() != s.w() {
            return Err(Error::Config(format!("kernel must be square, got {}x{}", s.h(), s.w())));
        }
        if s.h() % 2 == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {}", s.h())));
        }
        if stride == 0 || groups == 0 {
            return Err(Error::Config("stride and groups must be positive".into()));
        }
        if s.n() % groups != 0 {
            return Err(Error::Config(format!(
                "c_out {} not divisible by groups {groups}",
                s.n()
            )));
        }
        if bias.len() != s.n() {
            return Err(Error::Config(format!(
                "bias length {} does not match c_out {}",
                bias.len(),
                s.n()
            )));
        }
        Ok(Self {
            weight,
            bias,
            stride,
            groups,
        })
    }

    /// Zero-initialized weights.
    pub fn zeros(c_in: usize, c_out: usize, kernel: usize, stride: usize, groups: usize) -> Result<Self> {
        if groups == 0 || c_in % groups != 0 {
            return Err(Error::Config(format!("c_in {c_in} not divisible by groups {groups}")));
        }
        let shape = Shape4::new(c_out, c_in / groups, kernel, kernel)?;
        Self::new(Tensor4::zeros(shape), vec![T::zero(); c_out], stride, groups)
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n()
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().c() * self.groups
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h()
    }

    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        if input.c() != self.c_in() {
            return Err(Error::Shape(format!(
                "convolution expects {} input channels, got {} (input {input})",
                self.c_in(),
                input.c()
            )));
        }
        let (ho, _) = same_padding(input.h(), self.kernel(), self.stride);
        let (wo, _) = same_padding(input.w(), self.kernel(), self.stride);
        Shape4::new(input.n(), self.c_out(), ho, wo)
    }
}

struct Geometry {
    c_in_g: usize,
    c_out_g: usize,
    k: usize,
    stride: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    pad_h: usize,
    pad_w: usize,
}

impl Geometry {
    fn new<T: Element>(x: Shape4, p: &ConvParams<T>) -> Self {
        let k = p.kernel();
        let (ho, pad_h) = same_padding(x.h(), k, p.stride);
        let (wo, pad_w) = same_padding(x.w(), k, p.stride);
        Self {
            c_in_g: p.c_in() / p.groups,
            c_out_g: p.c_out() / p.groups,
            k,
            stride: p.stride,
            h: x.h(),
            w: x.w(),
            ho,
            wo,
            pad_h,
            pad_w,
        }
    }

    fn col_rows(&self) -> usize {
        self.c_in_g * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Input coordinate for output position `o` and kernel tap `t`, if it
    /// falls inside the image.
    #[inline]
    fn source(o: usize, t: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + t).checked_sub(pad)?;
        (pos < extent).then_some(pos)
    }

    /// Unfolds the `c_in_g` channel planes starting at `planes` into `col`.
    fn im2col<T: Element>(&self, planes: &[T], col: &mut [T]) {
        let ncols = self.col_cols();
        for ci in 0..self.c_in_g {
            let plane = &planes[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * self.k + ki) * self.k + kj;
                    let dst = &mut col[row * ncols..(row + 1) * ncols];
                    for oh in 0..self.ho {
                        let ih = Self::source(oh, ki, self.stride, self.pad_h, self.h);
                        for ow in 0..self.wo {
                            dst[oh * self.wo + ow] = match (ih, Self::source(ow, kj, self.stride, self.pad_w, self.w)) {
                                (Some(ih), Some(iw)) => plane[ih * self.w + iw],
                                _ => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: scatters `col` back onto the planes.
    fn col2im<T: Element>(&self, col: &[T], planes: &mut [T]) {
        let ncols = self.col_cols();
        for ci in 0..self.c_in_g {
            let plane = &mut planes[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * self.k + ki) * self.k + kj;
                    let src = &col[row * ncols..(row + 1) * ncols];
                    for oh in 0..self.ho {
                        let Some(ih) = Self::source(oh, ki, self.stride, self.pad_h, self.h) else {
                            continue;
                        };
                        for ow in 0..self.wo {
                            if let Some(iw) = Self::source(ow, kj, self.stride, self.pad_w, self.w) {
                                plane[ih * self.w + iw] += src[oh * self.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded cross-correlation. `groups == c_in == c_out` is depthwise.
pub fn conv2d_forward<T: Element>(x: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    let out_shape = p.output_shape(x.shape())?;
    let g = Geometry::new(x.shape(), p);
    let mut out = Tensor4::zeros(out_shape);
    let plane_in = g.h * g.w;
    let plane_out = g.col_cols();
    let wrow = g.col_rows();
    let mut col = vec![T::zero(); g.col_rows() * g.col_cols()];
    for n in 0..x.shape().n() {
        for grp in 0..p.groups {
            let in_start = (n * p.c_in() + grp * g.c_in_g) * plane_in;
            g.im2col(&x.data()[in_start..in_start + g.c_in_g * plane_in], &mut col);
            let w = &p.weight.data()[grp * g.c_out_g * wrow..(grp + 1) * g.c_out_g * wrow];
            let out_start = (n * p.c_out() + grp * g.c_out_g) * plane_out;
            let dst = &mut out.data_mut()[out_start..out_start + g.c_out_g * plane_out];
            for (co, chunk) in dst.chunks_mut(plane_out).enumerate() {
                chunk.fill(p.bias[grp * g.c_out_g + co]);
            }
            gemm_nn(g.c_out_g, wrow, plane_out, w, &col, dst);
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
///
/// `grad_params` holds `"weight"` then `"bias"`.
pub fn conv2d_backward<T: Element>(
    x: &Tensor4<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor4<T>,
) -> Result<LayerGrad<T>> {
    let out_shape = p.output_shape(x.shape())?;
    if grad_out.shape() != out_shape {
        return Err(Error::ShapeMismatch {
            left: grad_out.shape(),
            right: out_shape,
        });
    }
    let g = Geometry::new(x.shape(), p);
    let plane_in = g.h * g.w;
    let plane_out = g.col_cols();
    let wrow = g.col_rows();
    let mut grad_input = Tensor4::zeros(x.shape());
    let mut grad_weight = vec![T::zero(); p.weight.shape().len()];
    let mut grad_bias = vec![T::zero(); p.c_out()];
    let mut col = vec![T::zero(); wrow * plane_out];
    let mut dcol = vec![T::zero(); wrow * plane_out];
    for n in 0..x.shape().n() {
        for grp in 0..p.groups {
            let out_start = (n * p.c_out() + grp * g.c_out_g) * plane_out;
            let dy = &grad_out.data()[out_start..out_start + g.c_out_g * plane_out];
            for (co, chunk) in dy.chunks(plane_out).enumerate() {
                grad_bias[grp * g.c_out_g + co] += chunk.iter().copied().sum::<T>();
            }

            let in_start = (n * p.c_in() + grp * g.c_in_g) * plane_in;
            g.im2col(&x.data()[in_start..in_start + g.c_in_g * plane_in], &mut col);
            let gw = &mut grad_weight[grp * g.c_out_g * wrow..(grp + 1) * g.c_out_g * wrow];
            gemm_nt(g.c_out_g, plane_out, wrow, dy, &col, gw);

            let w = &p.weight.data()[grp * g.c_out_g * wrow..(grp + 1) * g.c_out_g * wrow];
            dcol.fill(T::zero());
            gemm_tn(wrow, g.c_out_g, plane_out, w, dy, &mut dcol);
            g.col2im(&dcol, &mut grad_input.data_mut()[in_start..in_start + g.c_in_g * plane_in]);
        }
    }
    Ok(LayerGrad {
        grad_input,
        grad_params: vec![
            ParamGrad {
                name: "weight",
                values: grad_weight,
            },
            ParamGrad {
                name: "bias",
                values: grad_bias,
            },
        ],
    })
}

/// Convolution layer with cached input and accumulated gradients.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub params: ConvParams<T>,
    grad_weight: Vec<T>,
    grad_bias: Vec<T>,
    input: Option<Tensor4<T>>,
}

impl<T: Element> Conv2d<T> {
    pub fn new(params: ConvParams<T>) -> Self {
        let grad_weight = vec![T::zero(); params.weight.shape().len()];
        let grad_bias = vec![T::zero(); params.c_out()];
        Self {
            params,
            grad_weight,
            grad_bias,
            input: None,
        }
    }
}

impl<T: Element> Module<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let y = conv2d_forward(x, &self.params)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let x = self
            .input
            .as_ref()
            .ok_or_else(|| Error::State("conv backward called before forward".into()))?;
        let g = conv2d_backward(x, &self.params, grad_out)?;
        for (acc, v) in self.grad_weight.iter_mut().zip(&g.grad_params[0].values) {
            *acc += *v;
        }
        for (acc, v) in self.grad_bias.iter_mut().zip(&g.grad_params[1].values) {
            *acc += *v;
        }
        Ok(g.grad_input)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        f(&join(prefix, "weight"), self.params.weight.data());
        f(&join(prefix, "bias"), &self.params.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        f(ParamMut {
            name: &join(prefix, "weight"),
            value: self.params.weight.data_mut(),
            grad: &mut self.grad_weight,
        });
        f(ParamMut {
            name: &join(prefix, "bias"),
            value: &mut self.params.bias,
            grad: &mut self.grad_bias,
        });
    }
}
