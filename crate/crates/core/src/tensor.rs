//! Rank-4 tensors (`n, c, h, w`, row-major) and the dense primitives the
//! layers are built from.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, NumAssign};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar element type of every tensor: `f32` or `f64`.
pub trait Element:
    Float + NumAssign + Sum + Default + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    /// Converts a literal. Lossy for `f32`.
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// splitmix64 seed expander.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        let span = (hi - lo) as u64 + 1;
        lo + (self.next_u64() % span) as usize
    }

    /// Standard normal via Box-Muller (cosine branch only).
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Derives an independent stream for a sub-component.
    pub fn fork(&mut self) -> SplitMix64 {
        SplitMix64::new(self.next_u64())
    }
}

/// Extents of a rank-4 tensor. All four are at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[usize; 4]", into = "[usize; 4]")]
pub struct Shape4 {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "shape extents must be positive, got ({n}, {c}, {h}, {w})"
            )));
        }
        let count = n
            .checked_mul(c)
            .and_then(|v| v.checked_mul(h))
            .and_then(|v| v.checked_mul(w));
        match count {
            Some(_) => Ok(Self { n, c, h, w }),
            None => Err(Error::Config(format!(
                "shape ({n}, {c}, {h}, {w}) overflows the addressable size"
            ))),
        }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.c
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Never true: kept for the `len`/`is_empty` pairing.
    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn with_c(&self, c: usize) -> Result<Self> {
        Self::new(self.n, c, self.h, self.w)
    }
}

impl TryFrom<[usize; 4]> for Shape4 {
    type Error = Error;
    fn try_from(v: [usize; 4]) -> Result<Self> {
        Shape4::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Shape4> for [usize; 4] {
    fn from(s: Shape4) -> Self {
        [s.n, s.c, s.h, s.w]
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense rank-4 array, layout order `n, c, h, w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Element> Tensor4<T> {
    pub fn zeros(shape: Shape4) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn full(shape: Shape4, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "buffer of {} elements cannot back shape {shape}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    #[inline]
    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = v;
    }

    /// Contiguous `h·w` plane of item `n`, channel `c`.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape,
                right: other.shape,
            });
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn cast<U: Element>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Distribution for [`tensor_from_seed`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distribution {
    /// Uniform on `[-1, 1]`.
    Uniform,
    Gaussian { sigma: f64 },
}

/// Deterministic tensor fill: identical `(shape, seed, dist)` always gives
/// identical elements.
pub fn tensor_from_seed<T: Element>(shape: Shape4, seed: u64, dist: Distribution) -> Result<Tensor4<T>> {
    Ok(Tensor4 {
        shape,
        data: seeded_values(shape.len(), seed, dist)?,
    })
}

pub(crate) fn seeded_values<T: Element>(len: usize, seed: u64, dist: Distribution) -> Result<Vec<T>> {
    let mut rng = SplitMix64::new(seed);
    match dist {
        Distribution::Uniform => Ok((0..len).map(|_| T::of(2.0 * rng.next_f64() - 1.0)).collect()),
        Distribution::Gaussian { sigma } => {
            if !(sigma > 0.0) || !sigma.is_finite() {
                return Err(Error::Config(format!("gaussian sigma must be positive, got {sigma}")));
            }
            Ok((0..len).map(|_| T::of(sigma * rng.next_gaussian())).collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

/// `out[i] = op(a[i], b[i])`, evaluated left to right.
pub fn elementwise<T: Element>(a: &Tensor4<T>, b: &Tensor4<T>, op: ElementwiseOp) -> Result<Tensor4<T>> {
    match op {
        ElementwiseOp::Add => a.zip_with(b, |x, y| x + y),
        ElementwiseOp::Sub => a.zip_with(b, |x, y| x - y),
        ElementwiseOp::Mul => a.zip_with(b, |x, y| x * y),
    }
}

/// Per-channel mean and biased variance over every `(n, h, w)` position.
pub fn channel_moments<T: Element>(x: &Tensor4<T>) -> (Vec<T>, Vec<T>) {
    let s = x.shape();
    let count = T::of((s.n() * s.plane()) as f64);
    let mut mean = vec![T::zero(); s.c()];
    let mut var = vec![T::zero(); s.c()];
    for c in 0..s.c() {
        let mut acc = T::zero();
        for n in 0..s.n() {
            for &v in x.plane(n, c) {
                acc += v;
            }
        }
        let m = acc / count;
        let mut sq = T::zero();
        for n in 0..s.n() {
            for &v in x.plane(n, c) {
                let d = v - m;
                sq += d * d;
            }
        }
        mean[c] = m;
        var[c] = sq / count;
    }
    (mean, var)
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Element> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(d: usize) -> Self {
        let mut m = Self::zeros(d, d);
        for i in 0..d {
            m.data[i * d + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "buffer of {} elements cannot back a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged matrix rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// Standard matrix product, accumulated in the element precision.
pub fn matmul<T: Element>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul inner dimensions disagree: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm_nn(a.rows, a.cols, b.cols, &a.data, &b.data, &mut out.data);
    Ok(out)
}

const PAR_THRESHOLD: usize = 1 << 15;

/// `c += a · b` with `a: m×k`, `b: k×n`. Each output row is accumulated in
/// a fixed order, so results do not depend on thread scheduling.
pub(crate) fn gemm_nn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 {
        return;
    }
    let row = |(i, crow): (usize, &mut [T])| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`.
pub(crate) fn gemm_nt<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 {
        return;
    }
    let row = |(i, crow): (usize, &mut [T])| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *cv += acc;
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`.
pub(crate) fn gemm_tn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 {
        return;
    }
    let row = |(i, crow): (usize, &mut [T])| {
        for p in 0..k {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
        Shape4::new(n, c, h, w).unwrap()
    }

    #[test]
    fn rejects_zero_extent() {
        assert!(Shape4::new(1, 0, 2, 2).is_err());
        assert!(Shape4::new(usize::MAX, 2, 2, 2).is_err());
    }

    #[test]
    fn seeded_tensors_are_deterministic() {
        let s = shape(2, 3, 4, 4);
        let a: Tensor4<f64> = tensor_from_seed(s, 7, Distribution::Uniform).unwrap();
        let b: Tensor4<f64> = tensor_from_seed(s, 7, Distribution::Uniform).unwrap();
        assert_eq!(a.data(), b.data());
        let c: Tensor4<f64> = tensor_from_seed(s, 8, Distribution::Uniform).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn uniform_range() {
        let t: Tensor4<f64> = tensor_from_seed(shape(1, 1, 2, 2), 3, Distribution::Uniform).unwrap();
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn gaussian_sample_mean_bound() {
        let sigma = 0.02;
        let t: Tensor4<f64> =
            tensor_from_seed(shape(2, 3, 4, 4), 11, Distribution::Gaussian { sigma }).unwrap();
        let mean = t.sum() / 96.0;
        assert!(mean.abs() <= 5.0 * sigma / 96f64.sqrt(), "mean {mean}");
    }

    #[test]
    fn gaussian_requires_positive_sigma() {
        let r: Result<Tensor4<f32>> = tensor_from_seed(shape(1, 1, 1, 1), 0, Distribution::Gaussian { sigma: 0.0 });
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn elementwise_cases() {
        let s = shape(1, 1, 1, 2);
        let x = Tensor4::from_vec(s, vec![2.0f64, 3.0]).unwrap();
        let y = Tensor4::from_vec(s, vec![4.0f64, 5.0]).unwrap();
        assert_eq!(elementwise(&x, &y, ElementwiseOp::Mul).unwrap().data(), &[8.0, 15.0]);
        assert_eq!(elementwise(&x, &Tensor4::zeros(s), ElementwiseOp::Add).unwrap(), x);
        assert!(elementwise(&x, &x, ElementwiseOp::Sub).unwrap().data().iter().all(|&v| v == 0.0));
        let z = Tensor4::<f64>::zeros(shape(1, 2, 1, 1));
        let err = elementwise(&x, &z, ElementwiseOp::Add).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(1, 1, 1, 2)") && msg.contains("(1, 2, 1, 1)"), "{msg}");
    }

    #[test]
    fn matmul_cases() {
        let a = Matrix::from_rows(&[&[1.0f64, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[&[1.0f64], &[1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
        assert_eq!(matmul(&a, &Matrix::identity(2)).unwrap(), a);
        let z = Matrix::<f64>::zeros(3, 2);
        assert!(matmul(&z, &a).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matmul(&b, &b).is_err());
    }

    #[test]
    fn transposed_gemm_variants_agree() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = seeded_values(m * k, 1, Distribution::Uniform).unwrap();
        let b: Vec<f64> = seeded_values(k * n, 2, Distribution::Uniform).unwrap();
        let mut want = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut want);
        let at = Matrix::from_vec(m, k, a.clone()).unwrap().transpose();
        let bt = Matrix::from_vec(k, n, b.clone()).unwrap().transpose();
        let mut tn = vec![0.0; m * n];
        gemm_tn(m, k, n, at.data(), &b, &mut tn);
        let mut nt = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, bt.data(), &mut nt);
        for i in 0..m * n {
            assert!((want[i] - tn[i]).abs() < 1e-14);
            assert!((want[i] - nt[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn moments_cases() {
        let t = Tensor4::full(shape(2, 3, 2, 2), 5.0f64);
        let (m, v) = channel_moments(&t);
        assert!(m.iter().all(|&x| x == 5.0) && v.iter().all(|&x| x == 0.0));

        let t = Tensor4::from_vec(shape(1, 1, 1, 2), vec![1.0f64, 3.0]).unwrap();
        let (m, v) = channel_moments(&t);
        assert_eq!((m[0], v[0]), (2.0, 1.0));

        let t = Tensor4::from_vec(shape(1, 2, 1, 1), vec![4.0f64, -1.0]).unwrap();
        let (_, v) = channel_moments(&t);
        assert_eq!(v, vec![0.0, 0.0]);
    }

    proptest::proptest! {
        #[test]
        fn moments_ignore_spatial_permutation(seed in 0u64..1000, rot in 1usize..12) {
            let s = shape(1, 2, 3, 4);
            let t: Tensor4<f64> = tensor_from_seed(s, seed, Distribution::Uniform).unwrap();
            let mut p = t.clone();
            for c in 0..2 {
                p.plane_mut(0, c).rotate_left(rot);
            }
            let (m1, v1) = channel_moments(&t);
            let (m2, v2) = channel_moments(&p);
            for c in 0..2 {
                proptest::prop_assert!((m1[c] - m2[c]).abs() < 1e-15);
                proptest::prop_assert!((v1[c] - v2[c]).abs() < 1e-15);
            }
        }

        #[test]
        fn add_is_commutative(seed in 0u64..1000) {
            let s = shape(1, 2, 2, 3);
            let a: Tensor4<f64> = tensor_from_seed(s, seed, Distribution::Uniform).unwrap();
            let b: Tensor4<f64> = tensor_from_seed(s, seed + 1, Distribution::Uniform).unwrap();
            proptest::prop_assert_eq!(
                elementwise(&a, &b, ElementwiseOp::Add).unwrap(),
                elementwise(&b, &a, ElementwiseOp::Add).unwrap()
            );
        }
    }
}
