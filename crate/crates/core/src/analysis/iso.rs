use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

use super::cost::{count_macs, CostOptions};

/// Chosen block counts and how they compare with the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsoSolution {
    pub blocks: Vec<usize>,
    pub macs: u64,
    pub target: u64,
    /// Real-valued per-stage counts the integers were rounded from.
    pub real: Vec<f64>,
}

impl IsoSolution {
    pub fn relative_error(&self) -> f64 {
        (self.macs as f64 - self.target as f64).abs() / self.target as f64
    }
}

/// Cost model of `template` as a function of its block counts, evaluated
/// on a `1 × c × h × w` input.
pub struct BlockCostModel<'a> {
    template: &'a ModelConfig,
    h: usize,
    w: usize,
    opts: CostOptions,
}

impl<'a> BlockCostModel<'a> {
    pub fn new(template: &'a ModelConfig, h: usize, w: usize, opts: CostOptions) -> Self {
        Self { template, h, w, opts }
    }

    /// Least legal block count per stage (the attention tail must fit).
    pub fn minimum(&self) -> Vec<usize> {
        self.template.stages.iter().map(|s| s.attention_tail.max(1)).collect()
    }

    pub fn with_blocks(&self, blocks: &[usize]) -> ModelConfig {
        let mut cfg = self.template.clone();
        for (s, &b) in cfg.stages.iter_mut().zip(blocks) {
            s.blocks = b;
        }
        cfg
    }

    pub fn macs(&self, blocks: &[usize]) -> Result<u64> {
        Ok(count_macs(&self.with_blocks(blocks), 1, self.h, self.w, self.opts)?.totals.macs)
    }
}

/// Block counts `bᵢ ≥ 1` proportional to `weights` whose MACs are closest to
/// `target`. The real solution `xᵢ = t·wᵢ` of the linear cost model is
/// rounded, and every combination of `round(xᵢ) − 1 ..= round(xᵢ) + 1` is
/// evaluated exactly; ties go to the smaller `Σ|bᵢ − xᵢ|`, then to the
/// lexicographically smaller vector.
pub fn iso_complexity_blocks(
    template: &ModelConfig,
    weights: &[f64],
    target: u64,
    h: usize,
    w: usize,
    opts: CostOptions,
) -> Result<IsoSolution> {
    let s = template.stages.len();
    if weights.len() != s {
        return Err(Error::Config(format!("{} ratio weights for {s} stages", weights.len())));
    }
    if weights.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
        return Err(Error::Config(format!("ratio weights must be positive, got {weights:?}")));
    }
    let model = BlockCostModel::new(template, h, w, opts);
    let min = model.minimum();
    let floor = model.macs(&min)?;
    if target < floor {
        return Err(Error::Infeasible { target, floor });
    }
    let per_block: Vec<f64> = (0..s)
        .map(|i| {
            let mut b = min.clone();
            b[i] += 1;
            Ok(model.macs(&b)? as f64 - floor as f64)
        })
        .collect::<Result<_>>()?;
    let fixed = floor as f64 - min.iter().zip(&per_block).map(|(&b, &c)| b as f64 * c).sum::<f64>();
    let slope: f64 = weights.iter().zip(&per_block).map(|(w, c)| w * c).sum();
    let t = (target as f64 - fixed) / slope;
    let real: Vec<f64> = weights.iter().map(|w| w * t).collect();

    let options: Vec<Vec<usize>> = real
        .iter()
        .zip(&min)
        .map(|(&x, &lo)| {
            let r = x.round().max(0.0) as usize;
            let mut v: Vec<usize> = [r.saturating_sub(1), r, r + 1].into_iter().map(|b| b.max(lo)).collect();
            v.dedup();
            v
        })
        .collect();

    let mut best: Option<(u64, f64, Vec<usize>, u64)> = None;
    for cand in cartesian(&options) {
        let macs = model.macs(&cand)?;
        let err = macs.abs_diff(target);
        let dist: f64 = cand.iter().zip(&real).map(|(&b, &x)| (b as f64 - x).abs()).sum();
        let better = match &best {
            None => true,
            Some((e, d, b, _)) => err < *e || (err == *e && (dist < *d || (dist == *d && cand < *b))),
        };
        if better {
            best = Some((err, dist, cand, macs));
        }
    }
    let (_, _, blocks, macs) = best.expect("every stage has at least one candidate");
    Ok(IsoSolution {
        blocks,
        macs,
        target,
        real,
    })
}

/// Every combination taking one entry from each list, in lexicographic order.
pub fn cartesian(options: &[Vec<usize>]) -> Vec<Vec<usize>> {
    options.iter().fold(vec![Vec::new()], |acc, opts| {
        acc.iter()
            .flat_map(|prefix| {
                opts.iter().map(move |&o| {
                    let mut v = prefix.clone();
                    v.push(o);
                    v
                })
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::variant_preset;

    #[test]
    fn unit_fixed_point() {
        let mut cfg = variant_preset("small").unwrap();
        for s in &mut cfg.stages {
            s.blocks = 1;
        }
        let opts = CostOptions::default();
        let target = count_macs(&cfg, 1, 128, 128, opts).unwrap().totals.macs;
        let sol = iso_complexity_blocks(&cfg, &[1.0; 4], target, 128, 128, opts).unwrap();
        assert_eq!(sol.blocks, vec![1, 1, 1, 1]);
        assert_eq!(sol.macs, target);
    }

    #[test]
    fn small_preset_fixed_point() {
        let cfg = variant_preset("small").unwrap();
        let opts = CostOptions::default();
        let target = count_macs(&cfg, 1, 128, 128, opts).unwrap().totals.macs;
        let sol = iso_complexity_blocks(&cfg, &[1.0, 7.0, 4.0, 1.0], target, 128, 128, opts).unwrap();
        assert_eq!(sol.blocks, vec![1, 7, 4, 1]);
    }

    #[test]
    fn infeasible_reports_floor() {
        let cfg = variant_preset("small").unwrap();
        match iso_complexity_blocks(&cfg, &[1.0; 4], 10, 128, 128, CostOptions::default()) {
            Err(Error::Infeasible { target: 10, floor }) => assert!(floor > 10),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_bad_weights() {
        let cfg = variant_preset("small").unwrap();
        assert!(iso_complexity_blocks(&cfg, &[1.0, 0.0, 1.0, 1.0], 1 << 40, 128, 128, CostOptions::default()).is_err());
        assert!(iso_complexity_blocks(&cfg, &[1.0; 3], 1 << 40, 128, 128, CostOptions::default()).is_err());
    }

    #[test]
    fn cartesian_order() {
        let v = cartesian(&[vec![1, 2], vec![3, 4]]);
        assert_eq!(v, vec![vec![1, 3], vec![1, 4], vec![2, 3], vec![2, 4]]);
    }
}
