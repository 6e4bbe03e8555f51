use crate::error::{Error, Result};
use crate::tensor::{Element, Shape4, Tensor4};

/// Non-overlapping `factor × factor` average pooling.
pub fn avg_pool<T: Element>(x: &Tensor4<T>, factor: usize) -> Result<Tensor4<T>> {
    let s = x.shape();
    if factor == 0 || s.h() % factor != 0 || s.w() % factor != 0 {
        return Err(Error::Shape(format!(
            "average pool by {factor} needs spatial extents divisible by {factor}, got {s}"
        )));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let out_shape = Shape4::new(s.n(), s.c(), s.h() / factor, s.w() / factor)?;
    let scale = T::one() / T::of((factor * factor) as f64);
    let mut out = Tensor4::zeros(out_shape);
    for n in 0..s.n() {
        for c in 0..s.c() {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for oh in 0..out_shape.h() {
                for ow in 0..out_shape.w() {
                    let mut acc = T::zero();
                    for i in 0..factor {
                        for j in 0..factor {
                            acc += src[(oh * factor + i) * s.w() + ow * factor + j];
                        }
                    }
                    dst[oh * out_shape.w() + ow] = acc * scale;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`avg_pool`] for an input of shape `input`.
pub fn avg_pool_backward<T: Element>(grad_out: &Tensor4<T>, factor: usize, input: Shape4) -> Result<Tensor4<T>> {
    let s = grad_out.shape();
    if factor == 0 || input.h() != s.h() * factor || input.w() != s.w() * factor || input.c() != s.c() || input.n() != s.n() {
        return Err(Error::Shape(format!(
            "pool gradient {s} does not match input {input} at factor {factor}"
        )));
    }
    if factor == 1 {
        return Ok(grad_out.clone());
    }
    let scale = T::one() / T::of((factor * factor) as f64);
    let mut grad_in = Tensor4::zeros(input);
    for n in 0..s.n() {
        for c in 0..s.c() {
            let src = grad_out.plane(n, c);
            let dst = grad_in.plane_mut(n, c);
            for ih in 0..input.h() {
                for iw in 0..input.w() {
                    dst[ih * input.w() + iw] = src[(ih / factor) * s.w() + iw / factor] * scale;
                }
            }
        }
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pools_and_spreads() {
        let s = Shape4::new(1, 1, 2, 2).unwrap();
        let x = Tensor4::from_vec(s, vec![1.0f64, 2.0, 3.0, 6.0]).unwrap();
        let y = avg_pool(&x, 2).unwrap();
        assert_eq!(y.data(), &[3.0]);
        let g = avg_pool_backward(&Tensor4::full(y.shape(), 4.0), 2, s).unwrap();
        assert_eq!(g.data(), &[1.0; 4]);
        assert!(avg_pool(&Tensor4::<f64>::zeros(Shape4::new(1, 1, 3, 3).unwrap()), 2).is_err());
    }
}
