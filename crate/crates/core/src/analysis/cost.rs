use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::blocks::{BlockKind, BlockSpec};
use crate::error::{Error, Result};
use crate::layers::default_heads;
use crate::model::{Head, ModelConfig};

/// Counting switches. Elementwise layers (BN, GELU, LayerNorm) cost one MAC
/// per element unless excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostOptions {
    pub include_elementwise: bool,
}

impl Default for CostOptions {
    fn default() -> Self {
        Self {
            include_elementwise: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerOp {
    Conv {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Gelu {
        channels: usize,
    },
    LayerNorm {
        channels: usize,
    },
    Attention {
        dim: usize,
        heads: usize,
    },
}

impl LayerOp {
    fn conv(c_in: usize, c_out: usize, kernel: usize, stride: usize, groups: usize) -> Self {
        LayerOp::Conv {
            c_in,
            c_out,
            kernel,
            stride,
            groups,
        }
    }

    pub fn params(&self) -> u64 {
        match *self {
            LayerOp::Conv {
                c_in,
                c_out,
                kernel,
                groups,
                ..
            } => (kernel * kernel * (c_in / groups) * c_out + c_out) as u64,
            LayerOp::BatchNorm { channels } | LayerOp::LayerNorm { channels } => 2 * channels as u64,
            LayerOp::Gelu { .. } => 0,
            LayerOp::Attention { dim, .. } => 4 * (dim * dim + dim) as u64,
        }
    }

    /// Non-trainable state: BN running mean and variance.
    pub fn buffers(&self) -> u64 {
        match *self {
            LayerOp::BatchNorm { channels } => 2 * channels as u64,
            _ => 0,
        }
    }

    /// MACs for one output tensor of shape `out` (batch included).
    pub fn macs(&self, out: [usize; 4], opts: CostOptions) -> u64 {
        let [n, c, h, w] = out.map(|v| v as u64);
        match *self {
            LayerOp::Conv {
                c_in, kernel, groups, ..
            } => n * h * w * c * (kernel * kernel * (c_in / groups)) as u64,
            LayerOp::BatchNorm { .. } | LayerOp::Gelu { .. } | LayerOp::LayerNorm { .. } => {
                if opts.include_elementwise {
                    n * h * w * c
                } else {
                    0
                }
            }
            LayerOp::Attention { .. } => {
                let t = h * w;
                n * (t * 3 * c * c + 2 * t * t * c + t * c * c)
            }
        }
    }

    pub fn stride(&self) -> usize {
        match *self {
            LayerOp::Conv { stride, .. } => stride,
            _ => 1,
        }
    }

    pub fn out_channels(&self, c_in: usize) -> usize {
        match *self {
            LayerOp::Conv { c_out, .. } => c_out,
            _ => c_in,
        }
    }
}

/// One layer of a structural plan, named like the parameters it owns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedLayer {
    pub id: String,
    pub group: String,
    pub op: LayerOp,
}

/// Layers of a block in execution order, with ids relative to the block.
pub fn block_layers(spec: &BlockSpec) -> Vec<(&'static str, LayerOp)> {
    let w = spec.width;
    match spec.kind {
        BlockKind::DriveNext => vec![
            ("lk_conv", LayerOp::conv(w, spec.lk_channels, 3, 1, 1)),
            ("lk_bn", LayerOp::BatchNorm {
                channels: spec.lk_channels,
            }),
            ("lk_act", LayerOp::Gelu {
                channels: spec.lk_channels,
            }),
            ("lc_conv", LayerOp::conv(spec.lk_channels, w, 1, 1, 1)),
            ("lc_bn", LayerOp::BatchNorm { channels: w }),
            ("out_act", LayerOp::Gelu { channels: w }),
        ],
        BlockKind::Hybrid => vec![
            ("dw_conv", LayerOp::conv(w, w, 3, 1, w)),
            ("bn", LayerOp::BatchNorm { channels: w }),
            ("attn", LayerOp::Attention {
                dim: w,
                heads: spec.heads,
            }),
        ],
        BlockKind::ConvNext => vec![
            ("dw_conv", LayerOp::conv(w, w, 7, 1, w)),
            ("norm", LayerOp::LayerNorm { channels: w }),
            ("pw_expand", LayerOp::conv(w, 4 * w, 1, 1, 1)),
            ("act", LayerOp::Gelu { channels: 4 * w }),
            ("pw_project", LayerOp::conv(4 * w, w, 1, 1, 1)),
        ],
    }
}

pub fn block_params(spec: &BlockSpec) -> u64 {
    block_layers(spec).iter().map(|(_, op)| op.params()).sum()
}

/// MACs of one block on a `(n, width, h, w)` input.
pub fn block_macs(spec: &BlockSpec, n: usize, h: usize, w: usize, opts: CostOptions) -> u64 {
    let mut c = spec.width;
    block_layers(spec)
        .iter()
        .map(|(_, op)| {
            c = op.out_channels(c);
            op.macs([n, c, h, w], opts)
        })
        .sum()
}

fn downsample_layers(prefix: &str, group: &str, c_in: usize, c_out: usize) -> Vec<PlannedLayer> {
    [
        ("conv", LayerOp::conv(c_in, c_out, 3, 2, 1)),
        ("bn", LayerOp::BatchNorm { channels: c_out }),
        ("act", LayerOp::Gelu { channels: c_out }),
    ]
    .into_iter()
    .map(|(name, op)| PlannedLayer {
        id: format!("{prefix}.{name}"),
        group: group.to_string(),
        op,
    })
    .collect()
}

/// The main path of a network (stem, stages, head) in execution order.
/// Skip projections are returned separately because they branch off.
pub fn plan_main_path(cfg: &ModelConfig) -> Vec<PlannedLayer> {
    let mut out = Vec::new();
    let mut prev = cfg.input_channels;
    if cfg.has_stem() {
        let c = cfg.stages[0].lc_channels;
        out.extend(downsample_layers("stem", "stem", prev, c));
        prev = c;
    }
    for (i, s) in cfg.stages.iter().enumerate() {
        let group = format!("stage{}", i + 1);
        out.extend(downsample_layers(&format!("{group}.downsample"), &group, prev, s.lc_channels));
        for b in 0..s.blocks {
            let spec = if b < s.conv_blocks() {
                BlockSpec::drivenext(s.lc_channels, s.lk_channels)
            } else {
                BlockSpec {
                    heads: default_heads(s.lc_channels),
                    ..BlockSpec::hybrid(s.lc_channels)
                }
            };
            for (name, op) in block_layers(&spec) {
                out.push(PlannedLayer {
                    id: format!("{group}.block{}.{name}", b + 1),
                    group: group.clone(),
                    op,
                });
            }
        }
        prev = s.lc_channels;
    }
    if cfg.head == Head::Heatmap {
        out.push(PlannedLayer {
            id: "head".into(),
            group: "head".into(),
            op: LayerOp::conv(prev, 1, 1, 1, 1),
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub id: String,
    pub group: String,
    #[serde(flatten)]
    pub op: LayerOp,
    pub params: u64,
    pub buffers: u64,
    pub macs: u64,
    pub output_shape: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCost {
    pub group: String,
    pub params: u64,
    pub buffers: u64,
    pub macs: u64,
    pub output_shape: [usize; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTotals {
    pub params: u64,
    pub buffers: u64,
    pub macs: u64,
    /// Largest single layer output, in elements.
    pub peak_activation: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub config: String,
    pub input_shape: [usize; 4],
    pub options: CostOptions,
    pub per_layer: Vec<LayerCost>,
    /// Groups in execution order: `stem`, `stage1`..`stageS`, `skips`, `head`.
    pub per_stage: Vec<GroupCost>,
    pub totals: CostTotals,
}

impl CostReport {
    pub fn group(&self, name: &str) -> Option<&GroupCost> {
        self.per_stage.iter().find(|g| g.group == name)
    }

    pub fn stage_macs(&self) -> Vec<u64> {
        self.per_stage
            .iter()
            .filter(|g| g.group.starts_with("stage"))
            .map(|g| g.macs)
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn layer_cost(layer: &PlannedLayer, out: [usize; 4], opts: CostOptions) -> LayerCost {
    LayerCost {
        id: layer.id.clone(),
        group: layer.group.clone(),
        op: layer.op,
        params: layer.op.params(),
        buffers: layer.op.buffers(),
        macs: layer.op.macs(out, opts),
        output_shape: out,
    }
}

/// Full cost report for a `batch × input_channels × h × w` input.
pub fn count_macs(cfg: &ModelConfig, batch: usize, h: usize, w: usize, opts: CostOptions) -> Result<CostReport> {
    let f = cfg.reduction();
    if batch == 0 || h == 0 || w == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::Shape(format!(
            "input {h}x{w} is not divisible by the reduction factor {f}"
        )));
    }
    let mut per_layer = Vec::new();
    let (mut c, mut hh, mut ww) = (cfg.input_channels, h, w);
    let mut stage_shapes = Vec::new();
    for layer in plan_main_path(cfg) {
        if layer.group == "head" {
            continue;
        }
        let s = layer.op.stride();
        c = layer.op.out_channels(c);
        hh = hh.div_ceil(s);
        ww = ww.div_ceil(s);
        let shape = [batch, c, hh, ww];
        per_layer.push(layer_cost(&layer, shape, opts));
        if let Some(i) = layer.group.strip_prefix("stage").and_then(|v| v.parse::<usize>().ok()) {
            if stage_shapes.len() < i {
                stage_shapes.push(shape);
            }
            stage_shapes[i - 1] = shape;
        }
    }
    let final_shape = [batch, cfg.final_width(), hh, ww];
    if cfg.has_skips() {
        for source in [1usize, 2] {
            let src = stage_shapes[source];
            let layer = PlannedLayer {
                id: format!("skip{}", source + 1),
                group: "skips".into(),
                op: LayerOp::conv(src[1], cfg.final_width(), 1, 1, 1),
            };
            per_layer.push(layer_cost(&layer, [batch, cfg.final_width(), src[2], src[3]], opts));
        }
    }
    if cfg.head == Head::Heatmap {
        let layer = PlannedLayer {
            id: "head".into(),
            group: "head".into(),
            op: LayerOp::conv(cfg.final_width(), 1, 1, 1, 1),
        };
        per_layer.push(layer_cost(&layer, [batch, 1, final_shape[2], final_shape[3]], opts));
    }
    let mut per_stage: Vec<GroupCost> = Vec::new();
    for l in &per_layer {
        match per_stage.last_mut() {
            Some(g) if g.group == l.group => {
                g.params += l.params;
                g.buffers += l.buffers;
                g.macs += l.macs;
                g.output_shape = l.output_shape;
            }
            _ => per_stage.push(GroupCost {
                group: l.group.clone(),
                params: l.params,
                buffers: l.buffers,
                macs: l.macs,
                output_shape: l.output_shape,
            }),
        }
    }
    if let Some(g) = per_stage.iter_mut().find(|g| g.group == "skips") {
        g.output_shape = final_shape;
    }
    let totals = CostTotals {
        params: per_layer.iter().map(|l| l.params).sum(),
        buffers: per_layer.iter().map(|l| l.buffers).sum(),
        macs: per_layer.iter().map(|l| l.macs).sum(),
        peak_activation: per_layer
            .iter()
            .map(|l| l.output_shape.iter().product::<usize>() as u64)
            .max()
            .unwrap_or(0),
    };
    Ok(CostReport {
        config: cfg.name.clone(),
        input_shape: [batch, cfg.input_channels, h, w],
        options: opts,
        per_layer,
        per_stage,
        totals,
    })
}

/// Trainable parameters of the network described by `cfg`.
pub fn count_params(cfg: &ModelConfig) -> u64 {
    let mut total: u64 = plan_main_path(cfg).iter().map(|l| l.op.params()).sum();
    if cfg.has_skips() {
        total += [1usize, 2]
            .iter()
            .map(|&s| LayerOp::conv(cfg.stages[s].lc_channels, cfg.final_width(), 1, 1, 1).params())
            .sum::<u64>();
    }
    total
}

fn fmt_count(v: u64) -> String {
    let s = v.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Per-group table for terminals.
pub fn render_cost_table(report: &CostReport) -> String {
    let mut out = String::new();
    let [n, c, h, w] = report.input_shape;
    let _ = writeln!(out, "{} @ ({n}, {c}, {h}, {w})", report.config);
    let _ = writeln!(out, "{:<10} {:>14} {:>18}  output", "group", "params", "macs");
    for g in &report.per_stage {
        let [a, b, c, d] = g.output_shape;
        let _ = writeln!(
            out,
            "{:<10} {:>14} {:>18}  ({a}, {b}, {c}, {d})",
            g.group,
            fmt_count(g.params),
            fmt_count(g.macs)
        );
    }
    let t = &report.totals;
    let _ = writeln!(out, "{:<10} {:>14} {:>18}", "total", fmt_count(t.params), fmt_count(t.macs));
    let _ = writeln!(out, "buffers {}  peak activation {}", fmt_count(t.buffers), fmt_count(t.peak_activation));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::variant_preset;

    #[test]
    fn dense_conv_closed_forms() {
        let op = LayerOp::conv(64, 128, 3, 1, 1);
        assert_eq!(op.params(), 73_856);
        assert_eq!(op.macs([1, 128, 16, 16], CostOptions::default()), 18_874_368);
    }

    #[test]
    fn block_params_match_hand_counts() {
        assert_eq!(block_params(&BlockSpec::drivenext(256, 128)), 328_832);
        assert_eq!(block_params(&BlockSpec::convnext(64)), 36_416);
        let hybrid = block_params(&BlockSpec::hybrid(256));
        assert_eq!(hybrid, 263_168 + 3 * 3 * 256 + 256 + 2 * 256);
    }

    #[test]
    fn totals_are_sums() {
        let cfg = variant_preset("tiny").unwrap();
        let r = count_macs(&cfg, 1, 128, 128, CostOptions::default()).unwrap();
        let layer_macs: u64 = r.per_layer.iter().map(|l| l.macs).sum();
        let group_macs: u64 = r.per_stage.iter().map(|g| g.macs).sum();
        assert_eq!(r.totals.macs, layer_macs);
        assert_eq!(r.totals.macs, group_macs);
        assert_eq!(r.totals.params, count_params(&cfg));
        assert_eq!(r.group("stage4").unwrap().output_shape, [1, 128, 4, 4]);
    }

    #[test]
    fn elementwise_flag() {
        let cfg = variant_preset("tiny").unwrap();
        let with = count_macs(&cfg, 1, 64, 64, CostOptions::default()).unwrap();
        let without = count_macs(&cfg, 1, 64, 64, CostOptions { include_elementwise: false }).unwrap();
        assert!(without.totals.macs < with.totals.macs);
        let bn = with.per_layer.iter().find(|l| l.id == "stem.bn").unwrap();
        assert_eq!(bn.macs, 64 * 32 * 32);
    }

    #[test]
    fn attention_grows_faster_than_four_times() {
        let op = LayerOp::Attention { dim: 64, heads: 2 };
        let small = op.macs([1, 64, 4, 4], CostOptions::default());
        let big = op.macs([1, 64, 8, 8], CostOptions::default());
        assert!(big > 4 * small);
    }

    #[test]
    fn indivisible_input() {
        let cfg = variant_preset("small").unwrap();
        assert!(matches!(count_macs(&cfg, 1, 100, 128, CostOptions::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn counts_thousands() {
        assert_eq!(fmt_count(1234567), "1,234,567");
        assert_eq!(fmt_count(12), "12");
    }
}
