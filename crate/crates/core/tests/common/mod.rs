#![allow(dead_code)]

use drivenext::ablation::RunRecord;
use drivenext::layers::{conv2d_forward, same_padding, ConvParams};
use drivenext::tensor::{tensor_from_seed, Distribution, Shape4, SplitMix64, Tensor4};

/// Direct seven-loop convolution with "same" padding.
pub fn naive_conv(x: &Tensor4<f64>, w: &Tensor4<f64>, bias: &[f64], stride: usize, groups: usize) -> Tensor4<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let k = ws.h();
    let (oh, ph) = same_padding(xs.h(), k, stride);
    let (ow, pw) = same_padding(xs.w(), k, stride);
    let cin_g = xs.c() / groups;
    let cout_g = ws.n() / groups;
    let mut y = Tensor4::zeros(Shape4::new(xs.n(), ws.n(), oh, ow).unwrap());
    for n in 0..xs.n() {
        for co in 0..ws.n() {
            let g = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..cin_g {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - ph as isize;
                                let ix = (ox * stride + kx) as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h() as isize || ix >= xs.w() as isize {
                                    continue;
                                }
                                acc += w.get(co, ci, ky, kx) * x.get(n, g * cin_g + ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    y.set(n, co, oy, ox, acc);
                }
            }
        }
    }
    y
}

/// Worst `|a − b| / max(|b|, 1)` over all entries.
pub fn worst_rel(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (p - q).abs() / q.abs().max(1.0))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy)]
pub enum ConvKind {
    Dense,
    Depthwise,
    Grouped,
}

/// One randomized case: returns (description, worst relative error).
pub fn conv_case(rng: &mut SplitMix64, kind: ConvKind) -> (String, f64) {
    let k = [1, 3, 5, 7][rng.range_inclusive(0, 3)];
    let stride = rng.range_inclusive(1, 2);
    let (c_in, c_out, groups) = match kind {
        ConvKind::Dense => (rng.range_inclusive(1, 6), rng.range_inclusive(1, 6), 1),
        ConvKind::Depthwise => {
            let c = rng.range_inclusive(1, 8);
            (c, c, c)
        }
        ConvKind::Grouped => {
            let g = rng.range_inclusive(2, 3);
            (g * rng.range_inclusive(1, 3), g * rng.range_inclusive(1, 3), g)
        }
    };
    let h = rng.range_inclusive(1, 12);
    let w = rng.range_inclusive(1, 12);
    let n = rng.range_inclusive(1, 2);
    let seed = rng.next_u64();
    let mut p = ConvParams::<f64>::zeros(c_in, c_out, k, stride, groups).unwrap();
    p.weight = tensor_from_seed(p.weight.shape(), seed, Distribution::Gaussian { sigma: 1.0 }).unwrap();
    p.bias = (0..c_out).map(|i| 0.1 * i as f64 - 0.2).collect();
    let x = tensor_from_seed(Shape4::new(n, c_in, h, w).unwrap(), seed ^ 1, Distribution::Uniform).unwrap();
    let fast = conv2d_forward(&x, &p).unwrap();
    let slow = naive_conv(&x, &p.weight, &p.bias, stride, groups);
    assert_eq!(fast.shape(), slow.shape());
    (
        format!("{kind:?} n{n} {c_in}->{c_out} g{groups} k{k} s{stride} {h}x{w}"),
        worst_rel(&fast, &slow),
    )
}

/// Pareto flags by the pairwise definition.
pub fn pareto_oracle(records: &[&RunRecord]) -> Vec<bool> {
    records
        .iter()
        .map(|a| {
            !records
                .iter()
                .any(|b| b.final_loss_mean < a.final_loss_mean && b.macs < a.macs)
        })
        .collect()
}

/// CSV text with the wall-clock column blanked.
pub fn without_timing(csv: &str) -> String {
    csv.lines()
        .map(|l| {
            let mut cells: Vec<&str> = l.split(',').collect();
            if cells.len() > 12 {
                cells[12] = "";
            }
            cells.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}
