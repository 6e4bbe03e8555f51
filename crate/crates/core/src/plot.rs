//! Deterministic SVG scatter plots of grid results.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::ablation::{pareto_flags, RunRecord};
use crate::analysis::FieldSize;
use crate::error::{Error, Result};

/// A numeric CSV column usable as a plot axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Params,
    Macs,
    RfFinal,
    FinalLossMean,
    FinalLossStd,
    WallSeconds,
    /// Sum of the per-stage block counts.
    Blocks,
    Seeds,
}

pub const METRIC_NAMES: [&str; 8] = [
    "params",
    "macs",
    "rf_final",
    "final_loss_mean",
    "final_loss_std",
    "wall_seconds",
    "blocks",
    "seeds",
];

impl Metric {
    pub fn name(&self) -> &'static str {
        METRIC_NAMES[*self as usize]
    }

    /// NaN when the record has no finite value (GLOBAL field, lost run).
    pub fn value(&self, r: &RunRecord) -> f64 {
        match self {
            Metric::Params => r.params as f64,
            Metric::Macs => r.macs as f64,
            Metric::RfFinal => match r.rf_final {
                FieldSize::Pixels(p) => p as f64,
                FieldSize::Global => f64::NAN,
            },
            Metric::FinalLossMean => r.final_loss_mean,
            Metric::FinalLossStd => r.final_loss_std,
            Metric::WallSeconds => r.wall_seconds,
            Metric::Blocks => r.blocks.iter().sum::<usize>() as f64,
            Metric::Seeds => r.seeds as f64,
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        const ALL: [Metric; 8] = [
            Metric::Params,
            Metric::Macs,
            Metric::RfFinal,
            Metric::FinalLossMean,
            Metric::FinalLossStd,
            Metric::WallSeconds,
            Metric::Blocks,
            Metric::Seeds,
        ];
        ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::Config(format!("unknown metric {s:?}; expected one of {}", METRIC_NAMES.join(", ")))
        })
    }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 60.0;
const TICKS: usize = 5;

fn range(values: &[f64]) -> (f64, f64) {
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo > hi {
        (0.0, 1.0)
    } else if lo == hi {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        (lo - pad, hi + pad)
    } else {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    }
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-2..1e5).contains(&a) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Scatter of `y` against `x`, one circle per record. Records on the
/// loss/MAC Pareto front (diverged runs excluded) are filled; the others
/// are hollow. Values that are not finite are pinned to the axis minimum.
pub fn render_scatter(records: &[RunRecord], x: Metric, y: Metric) -> String {
    let xs: Vec<f64> = records.iter().map(|r| x.value(r)).collect();
    let ys: Vec<f64> = records.iter().map(|r| y.value(r)).collect();
    let (x0, x1) = range(&xs);
    let (y0, y1) = range(&ys);
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let px = |v: f64| LEFT + if v.is_finite() { (v - x0) / (x1 - x0) * pw } else { 0.0 };
    let py = |v: f64| TOP + ph - if v.is_finite() { (v - y0) / (y1 - y0) * ph } else { 0.0 };

    let ranked: Vec<usize> = (0..records.len())
        .filter(|&i| !records[i].diverged && records[i].final_loss_mean.is_finite())
        .collect();
    let flags = pareto_flags(
        &ranked
            .iter()
            .map(|&i| (records[i].final_loss_mean, records[i].macs))
            .collect::<Vec<_>>(),
    );
    let mut pareto = vec![false; records.len()];
    for (&i, f) in ranked.iter().zip(flags) {
        pareto[i] = f;
    }

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    s.push_str("<style>.pareto{fill:#c0392b;stroke:#c0392b}.other{fill:none;stroke:#34495e}.diverged{stroke-dasharray:2,2}</style>\n");
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let (bx, by) = (LEFT, TOP + ph);
    let _ = writeln!(s, r#"<line class="axis" x1="{bx}" y1="{by}" x2="{}" y2="{by}" stroke="black"/>"#, LEFT + pw);
    let _ = writeln!(s, r#"<line class="axis" x1="{bx}" y1="{TOP}" x2="{bx}" y2="{by}" stroke="black"/>"#);
    for i in 0..TICKS {
        let f = i as f64 / (TICKS - 1) as f64;
        let (vx, vy) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (tx, ty) = (LEFT + f * pw, TOP + ph - f * ph);
        let _ = writeln!(s, r#"<line x1="{tx:.2}" y1="{by}" x2="{tx:.2}" y2="{:.2}" stroke="black"/>"#, by + 5.0);
        let _ = writeln!(s, r#"<text x="{tx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, by + 18.0, tick_label(vx));
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{ty:.2}" x2="{bx}" y2="{ty:.2}" stroke="black"/>"#, bx - 5.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, bx - 8.0, ty + 4.0, tick_label(vy));
    }
    let _ = writeln!(
        s,
        r#"<text class="label" x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 15.0,
        x.name()
    );
    let _ = writeln!(
        s,
        r#"<text class="label" x="15" y="{:.2}" text-anchor="middle" transform="rotate(-90 15 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        y.name()
    );
    for (i, r) in records.iter().enumerate() {
        let mut class = String::from(if pareto[i] { "marker pareto" } else { "marker other" });
        if r.diverged {
            class.push_str(" diverged");
        }
        let _ = writeln!(
            s,
            r#"<circle class="{class}" cx="{:.2}" cy="{:.2}" r="4"><title>{}</title></circle>"#,
            px(xs[i]),
            py(ys[i]),
            r.config_id
        );
    }
    s.push_str("</svg>\n");
    s
}
