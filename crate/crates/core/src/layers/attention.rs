//! Multi-head self-attention over the `h·w` spatial tokens of a feature map.
//!
//! No positional encoding is added: the depthwise convolution in front of
//! the attention in the hybrid block supplies position information, and the
//! bare layer stays permutation-equivariant over tokens.

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Element, Matrix, Tensor4};

use super::{join, LayerGrad, Module, ParamGrad, ParamMut};

/// Head count for a `dim`-channel attention: the largest divisor of `dim`
/// not exceeding `max(1, dim / 32)`.
pub fn default_heads(dim: usize) -> usize {
    let cap = (dim / 32).max(1);
    (1..=cap).rev().find(|h| dim % h == 0).unwrap_or(1)
}

/// Projection weights, applied as `W·x + b` per token.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub dim: usize,
    pub heads: usize,
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    pub w_o: Matrix<T>,
    pub bias_q: Vec<T>,
    pub bias_k: Vec<T>,
    pub bias_v: Vec<T>,
    pub bias_o: Vec<T>,
}

impl<T: Element> AttentionParams<T> {
    pub fn zeros(dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        let m = Matrix::zeros(dim, dim);
        let b = vec![T::zero(); dim];
        Ok(Self {
            dim,
            heads,
            w_q: m.clone(),
            w_k: m.clone(),
            w_v: m.clone(),
            w_o: m,
            bias_q: b.clone(),
            bias_k: b.clone(),
            bias_v: b.clone(),
            bias_o: b,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn check(&self, x: &Tensor4<T>) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "attention width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if x.shape().c() != self.dim {
            return Err(Error::Shape(format!(
                "attention over {} channels got input {}",
                self.dim,
                x.shape()
            )));
        }
        Ok(())
    }

    fn weights(&self) -> [&Matrix<T>; 4] {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o]
    }

    fn biases(&self) -> [&Vec<T>; 4] {
        [&self.bias_q, &self.bias_k, &self.bias_v, &self.bias_o]
    }

    fn weights_mut(&mut self) -> [(&mut Matrix<T>, &mut Vec<T>); 4] {
        [
            (&mut self.w_q, &mut self.bias_q),
            (&mut self.w_k, &mut self.bias_k),
            (&mut self.w_v, &mut self.bias_v),
            (&mut self.w_o, &mut self.bias_o),
        ]
    }
}

const NAMES: [(&str, &str); 4] = [("w_q", "bias_q"), ("w_k", "bias_k"), ("w_v", "bias_v"), ("w_o", "bias_o")];

/// Intermediates of one batch item. Token matrices are `tokens × dim`.
#[derive(Debug, Clone)]
struct ItemCache<T> {
    x: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Row-stochastic `tokens × tokens` weights, one per head.
    attn: Vec<Vec<T>>,
    o: Vec<T>,
}

fn gather_tokens<T: Element>(x: &Tensor4<T>, n: usize) -> Vec<T> {
    let s = x.shape();
    let (c, t) = (s.c(), s.plane());
    let mut out = vec![T::zero(); t * c];
    for ch in 0..c {
        for (ti, &v) in x.plane(n, ch).iter().enumerate() {
            out[ti * c + ch] = v;
        }
    }
    out
}

fn scatter_tokens<T: Element>(tokens: &[T], out: &mut Tensor4<T>, n: usize) {
    let c = out.shape().c();
    for ch in 0..c {
        for (ti, v) in out.plane_mut(n, ch).iter_mut().enumerate() {
            *v = tokens[ti * c + ch];
        }
    }
}

fn project<T: Element>(x: &[T], w: &Matrix<T>, b: &[T], tokens: usize) -> Vec<T> {
    let c = w.rows();
    let mut out: Vec<T> = (0..tokens).flat_map(|_| b.iter().copied()).collect();
    gemm_nt(tokens, w.cols(), c, x, w.data(), &mut out);
    out
}

fn head_slice<T: Element>(m: &[T], tokens: usize, dim: usize, head: usize, hd: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(tokens * hd);
    for t in 0..tokens {
        out.extend_from_slice(&m[t * dim + head * hd..t * dim + (head + 1) * hd]);
    }
    out
}

fn add_head_slice<T: Element>(m: &mut [T], part: &[T], tokens: usize, dim: usize, head: usize, hd: usize) {
    for t in 0..tokens {
        for (d, &v) in m[t * dim + head * hd..t * dim + (head + 1) * hd]
            .iter_mut()
            .zip(&part[t * hd..(t + 1) * hd])
        {
            *d += v;
        }
    }
}

fn forward_item<T: Element>(p: &AttentionParams<T>, x: Vec<T>, tokens: usize) -> (Vec<T>, ItemCache<T>) {
    let (dim, hd) = (p.dim, p.head_dim());
    let scale = T::one() / T::of(hd as f64).sqrt();
    let q = project(&x, &p.w_q, &p.bias_q, tokens);
    let k = project(&x, &p.w_k, &p.bias_k, tokens);
    let v = project(&x, &p.w_v, &p.bias_v, tokens);
    let mut o = vec![T::zero(); tokens * dim];
    let mut attn = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = head_slice(&q, tokens, dim, h, hd);
        let kh = head_slice(&k, tokens, dim, h, hd);
        let vh = head_slice(&v, tokens, dim, h, hd);
        let mut scores = vec![T::zero(); tokens * tokens];
        gemm_nt(tokens, hd, tokens, &qh, &kh, &mut scores);
        for row in scores.chunks_mut(tokens) {
            let max = row.iter().fold(T::neg_infinity(), |m, &s| m.max(s * scale));
            let mut total = T::zero();
            for s in row.iter_mut() {
                *s = (*s * scale - max).exp();
                total += *s;
            }
            for s in row.iter_mut() {
                *s /= total;
            }
        }
        let mut oh = vec![T::zero(); tokens * hd];
        gemm_nn(tokens, tokens, hd, &scores, &vh, &mut oh);
        add_head_slice(&mut o, &oh, tokens, dim, h, hd);
        attn.push(scores);
    }
    let y = project(&o, &p.w_o, &p.bias_o, tokens);
    (y, ItemCache { x, q, k, v, attn, o })
}

/// Accumulates parameter gradients into `grads` (order q, k, v, o; weight
/// then bias) and returns the token gradient.
fn backward_item<T: Element>(
    p: &AttentionParams<T>,
    cache: &ItemCache<T>,
    dy: &[T],
    tokens: usize,
    grads: &mut [(Vec<T>, Vec<T>); 4],
) -> Vec<T> {
    let (dim, hd) = (p.dim, p.head_dim());
    let scale = T::one() / T::of(hd as f64).sqrt();

    gemm_tn(dim, tokens, dim, dy, &cache.o, &mut grads[3].0);
    add_column_sums(dy, dim, &mut grads[3].1);
    let mut d_o = vec![T::zero(); tokens * dim];
    gemm_nn(tokens, dim, dim, dy, p.w_o.data(), &mut d_o);

    let mut dq = vec![T::zero(); tokens * dim];
    let mut dk = vec![T::zero(); tokens * dim];
    let mut dv = vec![T::zero(); tokens * dim];
    for h in 0..p.heads {
        let a = &cache.attn[h];
        let doh = head_slice(&d_o, tokens, dim, h, hd);
        let qh = head_slice(&cache.q, tokens, dim, h, hd);
        let kh = head_slice(&cache.k, tokens, dim, h, hd);
        let vh = head_slice(&cache.v, tokens, dim, h, hd);

        let mut da = vec![T::zero(); tokens * tokens];
        gemm_nt(tokens, hd, tokens, &doh, &vh, &mut da);
        let mut dvh = vec![T::zero(); tokens * hd];
        gemm_tn(tokens, tokens, hd, a, &doh, &mut dvh);

        // softmax Jacobian, then the 1/√d score scale
        let mut ds = vec![T::zero(); tokens * tokens];
        for r in 0..tokens {
            let arow = &a[r * tokens..(r + 1) * tokens];
            let darow = &da[r * tokens..(r + 1) * tokens];
            let dot: T = arow.iter().zip(darow).map(|(&x, &y)| x * y).sum();
            for (c, dsv) in ds[r * tokens..(r + 1) * tokens].iter_mut().enumerate() {
                *dsv = arow[c] * (darow[c] - dot) * scale;
            }
        }
        let mut dqh = vec![T::zero(); tokens * hd];
        gemm_nn(tokens, tokens, hd, &ds, &kh, &mut dqh);
        let mut dkh = vec![T::zero(); tokens * hd];
        gemm_tn(tokens, tokens, hd, &ds, &qh, &mut dkh);

        add_head_slice(&mut dq, &dqh, tokens, dim, h, hd);
        add_head_slice(&mut dk, &dkh, tokens, dim, h, hd);
        add_head_slice(&mut dv, &dvh, tokens, dim, h, hd);
    }

    let mut dx = vec![T::zero(); tokens * dim];
    for (i, (dproj, w)) in [(&dq, &p.w_q), (&dk, &p.w_k), (&dv, &p.w_v)].into_iter().enumerate() {
        gemm_tn(dim, tokens, dim, dproj, &cache.x, &mut grads[i].0);
        add_column_sums(dproj, dim, &mut grads[i].1);
        gemm_nn(tokens, dim, dim, dproj, w.data(), &mut dx);
    }
    dx
}

fn add_column_sums<T: Element>(m: &[T], cols: usize, acc: &mut [T]) {
    for row in m.chunks(cols) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

fn zero_grads<T: Element>(dim: usize) -> [(Vec<T>, Vec<T>); 4] {
    std::array::from_fn(|_| (vec![T::zero(); dim * dim], vec![T::zero(); dim]))
}

fn run_forward<T: Element>(x: &Tensor4<T>, p: &AttentionParams<T>) -> Result<(Tensor4<T>, Vec<ItemCache<T>>)> {
    p.check(x)?;
    let tokens = x.shape().plane();
    let mut out = Tensor4::zeros(x.shape());
    let mut caches = Vec::with_capacity(x.shape().n());
    for n in 0..x.shape().n() {
        let (y, cache) = forward_item(p, gather_tokens(x, n), tokens);
        scatter_tokens(&y, &mut out, n);
        caches.push(cache);
    }
    Ok((out, caches))
}

fn run_backward<T: Element>(
    p: &AttentionParams<T>,
    caches: &[ItemCache<T>],
    grad_out: &Tensor4<T>,
    grads: &mut [(Vec<T>, Vec<T>); 4],
) -> Result<Tensor4<T>> {
    if grad_out.shape().n() != caches.len() || grad_out.shape().c() != p.dim {
        return Err(Error::Shape(format!(
            "attention gradient {} does not match the cached forward",
            grad_out.shape()
        )));
    }
    let tokens = grad_out.shape().plane();
    if caches.iter().any(|c| c.x.len() != tokens * p.dim) {
        return Err(Error::Shape("attention gradient token count differs from the cached forward".into()));
    }
    let mut grad_in = Tensor4::zeros(grad_out.shape());
    for (n, cache) in caches.iter().enumerate() {
        let dy = gather_tokens(grad_out, n);
        let dx = backward_item(p, cache, &dy, tokens, grads);
        scatter_tokens(&dx, &mut grad_in, n);
    }
    Ok(grad_in)
}

/// Self-attention over the `h·w` tokens of every batch item.
pub fn mhsa_forward<T: Element>(x: &Tensor4<T>, p: &AttentionParams<T>) -> Result<Tensor4<T>> {
    run_forward(x, p).map(|(y, _)| y)
}

/// Gradients of [`mhsa_forward`]. Recomputes the forward intermediates.
///
/// `grad_params` order: `w_q, bias_q, w_k, bias_k, w_v, bias_v, w_o, bias_o`.
pub fn mhsa_backward<T: Element>(x: &Tensor4<T>, p: &AttentionParams<T>, grad_out: &Tensor4<T>) -> Result<LayerGrad<T>> {
    x.check_same_shape(grad_out)?;
    let (_, caches) = run_forward(x, p)?;
    let mut grads = zero_grads(p.dim);
    let grad_input = run_backward(p, &caches, grad_out, &mut grads)?;
    let mut grad_params = Vec::with_capacity(8);
    for ((w, b), (wn, bn)) in grads.into_iter().zip(NAMES) {
        grad_params.push(ParamGrad { name: wn, values: w });
        grad_params.push(ParamGrad { name: bn, values: b });
    }
    Ok(LayerGrad {
        grad_input,
        grad_params,
    })
}

/// Attention layer with cached intermediates.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention<T> {
    pub params: AttentionParams<T>,
    grads: [(Vec<T>, Vec<T>); 4],
    cache: Option<Vec<ItemCache<T>>>,
}

impl<T: Element> MultiHeadAttention<T> {
    pub fn new(params: AttentionParams<T>) -> Self {
        let grads = zero_grads(params.dim);
        Self {
            params,
            grads,
            cache: None,
        }
    }

    /// Attention weights of the last forward: `[item][head]`, each a
    /// row-major `tokens × tokens` matrix.
    pub fn last_attention(&self) -> Option<Vec<Vec<&[T]>>> {
        self.cache
            .as_ref()
            .map(|cs| cs.iter().map(|c| c.attn.iter().map(|a| a.as_slice()).collect()).collect())
    }
}

impl<T: Element> Module<T> for MultiHeadAttention<T> {
    fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (y, caches) = run_forward(x, &self.params)?;
        self.cache = Some(caches);
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let caches = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("attention backward called without cached intermediates".into()))?;
        run_backward(&self.params, caches, grad_out, &mut self.grads)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        for ((w, b), (wn, bn)) in self.params.weights().into_iter().zip(self.params.biases()).zip(NAMES) {
            f(&join(prefix, wn), w.data());
            f(&join(prefix, bn), b);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        for (((w, b), (gw, gb)), (wn, bn)) in self
            .params
            .weights_mut()
            .into_iter()
            .zip(self.grads.iter_mut())
            .zip(NAMES)
        {
            f(ParamMut {
                name: &join(prefix, wn),
                value: w.data_mut(),
                grad: gw,
            });
            f(ParamMut {
                name: &join(prefix, bn),
                value: b,
                grad: gb,
            });
        }
    }
}
