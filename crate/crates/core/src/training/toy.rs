use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape4, SplitMix64, Tensor4};

pub const NOISE_SIGMA: f64 = 0.1;
pub const OBJECT_VALUE: f64 = 1.0;
/// Heatmap bump width, in output pixels.
pub const BUMP_SIGMA: f64 = 1.0;

/// Synthetic small-object task: bright squares on noise, regressed as a
/// heatmap at the network's output resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTask {
    pub image_size: usize,
    pub channels: usize,
    /// Inclusive range of objects per image.
    pub objects: (usize, usize),
    /// Inclusive range of square sides, in pixels.
    pub side: (usize, usize),
    pub reduction: usize,
}

impl ToyTask {
    pub fn new(image_size: usize, reduction: usize) -> Self {
        Self {
            image_size,
            channels: 3,
            objects: (1, 3),
            side: (2, 4),
            reduction,
        }
    }

    pub fn output_size(&self) -> usize {
        self.image_size / self.reduction
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 || self.image_size == 0 || self.image_size % self.reduction != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by the reduction factor {}",
                self.image_size, self.reduction
            )));
        }
        if self.objects.0 > self.objects.1 || self.side.0 > self.side.1 || self.side.0 == 0 {
            return Err(Error::Config(format!(
                "bad toy ranges: objects {:?}, side {:?}",
                self.objects, self.side
            )));
        }
        if self.side.1 > self.image_size {
            return Err(Error::Config(format!(
                "square side {} exceeds image size {}",
                self.side.1, self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyObject {
    /// Top-left corner.
    pub row: usize,
    pub col: usize,
    pub side: usize,
}

impl ToyObject {
    /// Pixel taken as the object's center.
    pub fn center(&self) -> (usize, usize) {
        (self.row + self.side / 2, self.col + self.side / 2)
    }
}

#[derive(Debug, Clone)]
pub struct ToySample<T> {
    /// `(1, channels, size, size)`.
    pub image: Tensor4<T>,
    /// `(1, 1, size/reduction, size/reduction)`, values in `[0, 1]`.
    pub target: Tensor4<T>,
    pub objects: Vec<ToyObject>,
}

fn heatmap<T: Element>(task: &ToyTask, objects: &[ToyObject]) -> Result<Tensor4<T>> {
    let n = task.output_size();
    let mut t: Tensor4<T> = Tensor4::zeros(Shape4::new(1, 1, n, n)?);
    for o in objects {
        let (p, q) = o.center();
        let (cy, cx) = ((p / task.reduction) as f64, (q / task.reduction) as f64);
        for y in 0..n {
            for x in 0..n {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let v = (-d2 / (2.0 * BUMP_SIGMA * BUMP_SIGMA)).exp();
                if v > t.get(0, 0, y, x).as_f64() {
                    t.set(0, 0, y, x, T::of(v));
                }
            }
        }
    }
    Ok(t)
}

/// Deterministic batch of `count` samples.
pub fn generate_toy_batch<T: Element>(seed: u64, count: usize, task: &ToyTask) -> Result<Vec<ToySample<T>>> {
    task.validate()?;
    let mut rng = SplitMix64::new(seed);
    let s = task.image_size;
    (0..count)
        .map(|_| {
            let mut image = Tensor4::zeros(Shape4::new(1, task.channels, s, s)?);
            for v in image.data_mut() {
                *v = T::of(NOISE_SIGMA * rng.next_gaussian());
            }
            let k = rng.range_inclusive(task.objects.0, task.objects.1);
            let objects: Vec<ToyObject> = (0..k)
                .map(|_| {
                    let side = rng.range_inclusive(task.side.0, task.side.1);
                    let row = rng.range_inclusive(0, s - side);
                    let col = rng.range_inclusive(0, s - side);
                    ToyObject { row, col, side }
                })
                .collect();
            for o in &objects {
                for c in 0..task.channels {
                    let plane = image.plane_mut(0, c);
                    for y in o.row..o.row + o.side {
                        plane[y * s + o.col..y * s + o.col + o.side].fill(T::of(OBJECT_VALUE));
                    }
                }
            }
            let target = heatmap(task, &objects)?;
            Ok(ToySample { image, target, objects })
        })
        .collect()
}

/// Concatenates samples along the batch axis into (images, targets).
pub fn stack_batch<T: Element>(samples: &[ToySample<T>]) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("cannot stack an empty batch".into()))?;
    let cat = |get: &dyn Fn(&ToySample<T>) -> &Tensor4<T>| -> Result<Tensor4<T>> {
        let s = get(first).shape();
        let mut data = Vec::with_capacity(s.len() * samples.len());
        for x in samples {
            x.image.check_same_shape(&first.image)?;
            data.extend_from_slice(get(x).data());
        }
        Tensor4::from_vec(Shape4::new(samples.len(), s.c(), s.h(), s.w())?, data)
    };
    Ok((cat(&|x| &x.image)?, cat(&|x| &x.target)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossDirection {
    Value,
    Gradient,
}

/// Either the value or the gradient of a toy loss.
#[derive(Debug, Clone)]
pub enum LossOutput<T> {
    Value(T),
    Gradient(Tensor4<T>),
}

/// Mean squared error; its gradient is `2(pred − target)/N`.
pub fn toy_loss<T: Element>(pred: &Tensor4<T>, target: &Tensor4<T>, direction: LossDirection) -> Result<LossOutput<T>> {
    pred.check_same_shape(target)?;
    let n = T::of(pred.shape().len() as f64);
    Ok(match direction {
        LossDirection::Value => {
            let sum = pred
                .data()
                .iter()
                .zip(target.data())
                .fold(T::zero(), |acc, (&p, &t)| acc + (p - t) * (p - t));
            LossOutput::Value(sum / n)
        }
        LossDirection::Gradient => LossOutput::Gradient(pred.zip_with(target, |p, t| T::of(2.0) * (p - t) / n)?),
    })
}

pub fn mse<T: Element>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<T> {
    match toy_loss(pred, target, LossDirection::Value)? {
        LossOutput::Value(v) => Ok(v),
        LossOutput::Gradient(_) => unreachable!(),
    }
}

pub fn mse_grad<T: Element>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<Tensor4<T>> {
    match toy_loss(pred, target, LossDirection::Gradient)? {
        LossOutput::Gradient(g) => Ok(g),
        LossOutput::Value(_) => unreachable!(),
    }
}
