use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::run::RunRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Loss,
    /// Loss times MACs: lower is better on both axes at once.
    LossPerMac,
}

impl Objective {
    pub fn value(&self, r: &RunRecord) -> f64 {
        match self {
            Objective::Loss => r.final_loss_mean,
            Objective::LossPerMac => r.final_loss_mean * r.macs as f64,
        }
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss" => Ok(Objective::Loss),
            "loss_per_mac" => Ok(Objective::LossPerMac),
            other => Err(Error::Config(format!("unknown objective {other:?}; expected loss or loss_per_mac"))),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Loss => "loss",
            Objective::LossPerMac => "loss_per_mac",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedRecord {
    /// 1-based.
    pub rank: usize,
    pub pareto: bool,
    pub objective: f64,
    pub record: RunRecord,
}

/// For each `(loss, macs)` point: true iff no other point has both strictly
/// lower loss and strictly lower MACs.
pub fn pareto_flags(points: &[(f64, u64)]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by_key(|&i| points[i].1);
    let mut flags = vec![false; points.len()];
    // best loss among points with strictly fewer MACs than the current group
    let mut best_below = f64::INFINITY;
    let mut g = 0;
    while g < order.len() {
        let macs = points[order[g]].1;
        let end = g + order[g..].iter().take_while(|&&i| points[i].1 == macs).count();
        for &i in &order[g..end] {
            flags[i] = !(best_below < points[i].0);
        }
        for &i in &order[g..end] {
            best_below = best_below.min(points[i].0);
        }
        g = end;
    }
    flags
}

/// Drops diverged records, sorts the rest ascending by `objective` (ties by
/// `config_id`) and flags the loss/MAC Pareto front.
pub fn rank_results(records: &[RunRecord], objective: Objective) -> Vec<RankedRecord> {
    let mut kept: Vec<&RunRecord> = records
        .iter()
        .filter(|r| !r.diverged && r.final_loss_mean.is_finite())
        .collect();
    kept.sort_by(|a, b| {
        objective
            .value(a)
            .total_cmp(&objective.value(b))
            .then_with(|| a.config_id.cmp(&b.config_id))
    });
    let flags = pareto_flags(&kept.iter().map(|r| (r.final_loss_mean, r.macs)).collect::<Vec<_>>());
    kept.into_iter()
        .zip(flags)
        .enumerate()
        .map(|(i, (r, pareto))| RankedRecord {
            rank: i + 1,
            pareto,
            objective: objective.value(r),
            record: r.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::FieldSize;
    use proptest::prelude::*;

    fn rec(id: &str, loss: f64, macs: u64) -> RunRecord {
        RunRecord {
            config_id: id.into(),
            blocks: vec![1],
            lk_channels: vec![1],
            lc_channels: vec![1],
            attention_tail: vec![0],
            full_resolution: false,
            params: 1,
            macs,
            rf_final: FieldSize::Pixels(1),
            final_loss_mean: loss,
            final_loss_std: 0.0,
            diverged: false,
            wall_seconds: 0.0,
            seeds: 1,
        }
    }

    fn brute(points: &[(f64, u64)]) -> Vec<bool> {
        points
            .iter()
            .map(|a| !points.iter().any(|b| b.0 < a.0 && b.1 < a.1))
            .collect()
    }

    #[test]
    fn single_and_dominated() {
        let r = rank_results(&[rec("a", 1.0, 1)], Objective::Loss);
        assert_eq!((r[0].rank, r[0].pareto), (1, true));
        let r = rank_results(&[rec("b", 2.0, 20), rec("a", 1.0, 10)], Objective::Loss);
        assert_eq!(r.iter().map(|x| (x.record.config_id.as_str(), x.pareto)).collect::<Vec<_>>(), [("a", true), ("b", false)]);
    }

    #[test]
    fn diverged_are_dropped() {
        let mut d = rec("d", 0.1, 1);
        d.diverged = true;
        let r = rank_results(&[d, rec("a", 1.0, 1)], Objective::LossPerMac);
        assert_eq!(r.len(), 1);
    }

    proptest! {
        #[test]
        fn pareto_matches_pairwise_scan(pts in proptest::collection::vec((0u8..8, 0u64..8), 0..40)) {
            let pts: Vec<(f64, u64)> = pts.into_iter().map(|(l, m)| (l as f64 / 4.0, m)).collect();
            prop_assert_eq!(pareto_flags(&pts), brute(&pts));
        }
    }
}
