use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::layers::{same_padding, Module};
use crate::model::{ModelConfig, Network};
use crate::tensor::{tensor_from_seed, Distribution, Element, Shape4, Tensor4};

use super::cost::{plan_main_path, LayerOp};

/// Receptive-field side in input pixels, or global once attention has mixed
/// every position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FieldSize {
    Pixels(u64),
    Global,
}

impl fmt::Display for FieldSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldSize::Pixels(r) => write!(f, "{r}"),
            FieldSize::Global => f.write_str("GLOBAL"),
        }
    }
}

impl Serialize for FieldSize {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            FieldSize::Pixels(r) => s.serialize_u64(*r),
            FieldSize::Global => s.serialize_str("GLOBAL"),
        }
    }
}

impl<'de> Deserialize<'de> for FieldSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(r) => Ok(FieldSize::Pixels(r)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl std::str::FromStr for FieldSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "GLOBAL" {
            return Ok(FieldSize::Global);
        }
        s.parse()
            .map(FieldSize::Pixels)
            .map_err(|_| Error::Parse(format!("receptive field {s:?} is neither an integer nor GLOBAL")))
    }
}

/// Geometry of one sliding-window layer along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayer {
    pub kernel: usize,
    pub stride: usize,
    pub pad_before: usize,
}

/// Field after a prefix of layers: output unit `u` sees input pixels
/// `[u·jump + offset, u·jump + offset + r − 1]` (before clipping).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldTrace {
    pub r: u64,
    pub jump: u64,
    pub offset: i64,
}

impl FieldTrace {
    pub const IDENTITY: FieldTrace = FieldTrace { r: 1, jump: 1, offset: 0 };

    pub fn then(self, l: WindowLayer) -> FieldTrace {
        FieldTrace {
            r: self.r + (l.kernel as u64 - 1) * self.jump,
            offset: self.offset - (l.pad_before as u64 * self.jump) as i64,
            jump: self.jump * l.stride as u64,
        }
    }

    /// Input interval of output unit `u`, clipped to `[0, extent)`.
    pub fn clipped(&self, u: usize, extent: usize) -> (usize, usize) {
        let lo = u as i64 * self.jump as i64 + self.offset;
        let hi = lo + self.r as i64 - 1;
        (lo.max(0) as usize, hi.min(extent as i64 - 1) as usize)
    }
}

/// Composes a chain of layers with `r ← r + (k−1)·j; j ← j·s`.
pub fn compose(layers: &[WindowLayer]) -> FieldTrace {
    layers.iter().fold(FieldTrace::IDENTITY, |t, &l| t.then(l))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageField {
    pub stage: usize,
    pub r: FieldSize,
    pub jump: u64,
    pub offset: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveFieldReport {
    /// Raw stage outputs, before any skip merge.
    pub per_stage: Vec<StageField>,
    /// The merged network output, skip paths included.
    pub final_output: FieldSize,
}

impl ReceptiveFieldReport {
    pub fn final_stage(&self) -> &StageField {
        self.per_stage.last().expect("configs have at least two stages")
    }
}

// Padding before is the same at every input size a valid config admits: stride-2
// layers always see even extents.
fn window(op: &LayerOp) -> Option<WindowLayer> {
    match *op {
        LayerOp::Conv { kernel, stride, .. } => Some(WindowLayer {
            kernel,
            stride,
            pad_before: same_padding(2 * kernel, kernel, stride).1,
        }),
        _ => None,
    }
}

fn stage_traces(cfg: &ModelConfig) -> (Vec<FieldTrace>, Option<usize>) {
    let mut trace = FieldTrace::IDENTITY;
    let mut traces = vec![FieldTrace::IDENTITY; cfg.stages.len()];
    let mut first_global = None;
    for layer in plan_main_path(cfg) {
        let Some(i) = layer.group.strip_prefix("stage").and_then(|v| v.parse::<usize>().ok()) else {
            if layer.group == "stem" {
                if let Some(w) = window(&layer.op) {
                    trace = trace.then(w);
                }
            }
            continue;
        };
        if let Some(w) = window(&layer.op) {
            trace = trace.then(w);
        }
        if matches!(layer.op, LayerOp::Attention { .. }) && first_global.is_none() {
            first_global = Some(i - 1);
        }
        traces[i - 1] = trace;
    }
    (traces, first_global)
}

/// Analytic receptive field of every stage output and of the merged output.
pub fn receptive_field_analytic(cfg: &ModelConfig) -> ReceptiveFieldReport {
    let (traces, first_global) = stage_traces(cfg);
    let per_stage = traces
        .iter()
        .enumerate()
        .map(|(i, t)| StageField {
            stage: i + 1,
            r: match first_global {
                Some(g) if i >= g => FieldSize::Global,
                _ => FieldSize::Pixels(t.r),
            },
            jump: t.jump,
            offset: t.offset,
        })
        .collect::<Vec<_>>();
    let final_output = if first_global.is_some() {
        FieldSize::Global
    } else {
        let (lo, hi) = merged_interval(cfg, &traces, 0);
        FieldSize::Pixels((hi - lo + 1) as u64)
    };
    ReceptiveFieldReport {
        per_stage,
        final_output,
    }
}

/// Unclipped interval of merged-output unit `u`: the main path united with
/// each 1×1-projected, average-pooled skip path.
fn merged_interval(cfg: &ModelConfig, traces: &[FieldTrace], u: usize) -> (i64, i64) {
    let last = traces.len() - 1;
    let span = |t: &FieldTrace| {
        let lo = u as i64 * t.jump as i64 + t.offset;
        (lo, lo + t.r as i64 - 1)
    };
    let (mut lo, mut hi) = span(&traces[last]);
    if cfg.has_skips() {
        for source in [1usize, 2] {
            let pool = 1usize << (last - source);
            let t = traces[source].then(WindowLayer {
                kernel: pool,
                stride: pool,
                pad_before: 0,
            });
            let (a, b) = span(&t);
            lo = lo.min(a);
            hi = hi.max(b);
        }
    }
    (lo, hi)
}

/// Inclusive bounding box of a gradient support, in input pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportBox {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

impl SupportBox {
    pub fn height(&self) -> usize {
        self.rows.1 - self.rows.0 + 1
    }

    pub fn width(&self) -> usize {
        self.cols.1 - self.cols.0 + 1
    }

    pub fn covers(&self, h: usize, w: usize) -> bool {
        self.rows == (0, h - 1) && self.cols == (0, w - 1)
    }
}

/// Bounding box of the nonzero entries of `grad`, over batch and channels.
pub fn gradient_support<T: Element>(grad: &Tensor4<T>) -> Option<SupportBox> {
    let s = grad.shape();
    let mut bbox: Option<SupportBox> = None;
    for n in 0..s.n() {
        for c in 0..s.c() {
            let plane = grad.plane(n, c);
            for y in 0..s.h() {
                for x in 0..s.w() {
                    if plane[y * s.w() + x] != T::zero() {
                        bbox = Some(match bbox {
                            None => SupportBox {
                                rows: (y, y),
                                cols: (x, x),
                            },
                            Some(b) => SupportBox {
                                rows: (b.rows.0.min(y), b.rows.1.max(y)),
                                cols: (b.cols.0.min(x), b.cols.1.max(x)),
                            },
                        });
                    }
                }
            }
        }
    }
    bbox
}

fn center(extent: usize) -> usize {
    (extent - 1) / 2
}

fn one_hot<T: Element>(shape: Shape4) -> Tensor4<T> {
    let mut g = Tensor4::zeros(shape);
    g.set(0, 0, center(shape.h()), center(shape.w()), T::one());
    g
}

/// Input-gradient support of a one-hot at the center output position of a
/// single module, for a batch-1 input of `shape`.
pub fn module_support<T: Element>(m: &mut dyn Module<T>, shape: Shape4, seed: u64) -> Result<Option<SupportBox>> {
    let x = tensor_from_seed(shape, seed, Distribution::Uniform)?;
    let y = m.forward(&x)?;
    let g = m.backward(&one_hot(y.shape()))?;
    Ok(gradient_support(&g))
}

/// Measured receptive field of `stage` (zero-based): the network is
/// linearized, a one-hot gradient is injected at the center (floor) of the
/// raw stage output and the bounding box of the input gradient is returned.
pub fn receptive_field_empirical<T: Element>(
    net: &mut Network<T>,
    h: usize,
    w: usize,
    stage: usize,
    seed: u64,
) -> Result<SupportBox> {
    if stage >= net.stages.len() {
        return Err(Error::Config(format!(
            "stage index {stage} out of range for {} stages",
            net.stages.len()
        )));
    }
    net.linearize();
    let shape = Shape4::new(1, net.config.input_channels, h, w)?;
    let x = tensor_from_seed(shape, seed, Distribution::Uniform)?;
    let out = net.forward(&x)?;
    let mut pending = vec![None; net.stages.len()];
    pending[stage] = Some(one_hot(out.taps[stage].shape()));
    let g = net.backward_stages(pending)?;
    gradient_support(&g).ok_or_else(|| Error::State(format!("stage {} gradient has empty support", stage + 1)))
}

/// The support the analytic field predicts for the center unit of `stage`
/// on an `h × w` input, clipped to the image. Global stages cover it.
pub fn analytic_support(cfg: &ModelConfig, h: usize, w: usize, stage: usize) -> Result<SupportBox> {
    let f = cfg.reduction();
    if h % f != 0 || w % f != 0 {
        return Err(Error::Shape(format!("input {h}x{w} is not divisible by the reduction factor {f}")));
    }
    let (traces, first_global) = stage_traces(cfg);
    let t = traces
        .get(stage)
        .ok_or_else(|| Error::Config(format!("stage index {stage} out of range")))?;
    if first_global.is_some_and(|g| stage >= g) {
        return Ok(SupportBox {
            rows: (0, h - 1),
            cols: (0, w - 1),
        });
    }
    let (oh, ow) = (h / t.jump as usize, w / t.jump as usize);
    Ok(SupportBox {
        rows: t.clipped(center(oh), h),
        cols: t.clipped(center(ow), w),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Conv2d, ConvParams};
    use crate::model::variant_preset;

    fn k3(stride: usize) -> WindowLayer {
        WindowLayer {
            kernel: 3,
            stride,
            pad_before: 0,
        }
    }

    #[test]
    fn chain_examples() {
        let t = compose(&[k3(2), k3(2)]);
        assert_eq!((t.r, t.jump), (7, 4));
        assert_eq!(compose(&[k3(2), k3(2), k3(1)]).r, 15);
    }

    #[test]
    fn small_preset_fields() {
        let r = receptive_field_analytic(&variant_preset("small").unwrap());
        let rs: Vec<FieldSize> = r.per_stage.iter().map(|s| s.r).collect();
        assert_eq!(
            rs,
            [15, 135, 279, 375].map(FieldSize::Pixels).to_vec(),
            "stem 3, then +2j per 3x3 layer"
        );
        assert_eq!(r.per_stage.iter().map(|s| s.jump).collect::<Vec<_>>(), vec![4, 8, 16, 32]);
        assert_eq!(r.final_output, FieldSize::Pixels(375));
    }

    #[test]
    fn attention_is_global_from_its_stage() {
        let mut cfg = variant_preset("small").unwrap();
        cfg.stages[2].attention_tail = 1;
        let r = receptive_field_analytic(&cfg);
        assert_eq!(r.per_stage[1].r, FieldSize::Pixels(135));
        assert_eq!(r.per_stage[2].r, FieldSize::Global);
        assert_eq!(r.per_stage[3].r, FieldSize::Global);
        assert_eq!(r.final_output, FieldSize::Global);
    }

    #[test]
    fn single_conv_support() {
        let mut p = ConvParams::<f64>::zeros(1, 1, 3, 1, 1).unwrap();
        p.weight.data_mut().fill(1.0);
        let mut conv = Conv2d::new(p);
        let b = module_support(&mut conv, Shape4::new(1, 1, 9, 9).unwrap(), 1).unwrap().unwrap();
        assert_eq!((b.height(), b.width()), (3, 3));
        assert_eq!(b.rows, (3, 5));
    }

    #[test]
    fn field_size_text() {
        assert_eq!(serde_json::to_string(&FieldSize::Global).unwrap(), "\"GLOBAL\"");
        assert_eq!(serde_json::from_str::<FieldSize>("17").unwrap(), FieldSize::Pixels(17));
        assert_eq!("GLOBAL".parse::<FieldSize>().unwrap(), FieldSize::Global);
        assert!("wide".parse::<FieldSize>().is_err());
    }

    #[test]
    fn clipped_support_stays_inside() {
        let cfg = variant_preset("small").unwrap();
        // stage 2: center unit 15 of 32, jump 8, offset -60, r 135
        let b = analytic_support(&cfg, 256, 256, 1).unwrap();
        assert_eq!(b.rows, (60, 194));
        assert_eq!(b.height(), 135);
        // stage 3: unit 7 of 16 sees [-12, 266]
        let b = analytic_support(&cfg, 256, 256, 2).unwrap();
        assert!(b.covers(256, 256));
    }
}
