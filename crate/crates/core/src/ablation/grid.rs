use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::{count_macs, iso_complexity_blocks, CostOptions};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, StageConfig, DEFAULT_ATTENTION_STAGE, MAX_STAGES, MIN_STAGES};
use crate::training::TrainRecipe;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    Ratio,
    StageCount,
    BlockMultiplier,
    Attention,
    Resolution,
}

/// Candidate stage ratios swept when a ratio grid gives none.
pub const DEFAULT_RATIOS: [[usize; 4]; 5] = [[1, 1, 1, 1], [1, 4, 7, 1], [1, 7, 4, 1], [2, 7, 4, 2], [1, 2, 4, 1]];
pub const DEFAULT_MULTIPLIERS: [usize; 3] = [2, 4, 6];

fn default_seeds() -> usize {
    3
}
fn default_input_size() -> usize {
    256
}

/// The `"grid"` section of a config document. Only the fields of the chosen
/// kind are read; the rest keep their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub kind: GridKind,
    /// Training runs per config, seeded `recipe.seed + i`.
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default)]
    pub recipe: TrainRecipe,
    /// Square input side used for MAC counts and the iso-complexity target.
    #[serde(default = "default_input_size")]
    pub input_size: usize,

    /// ratio: stage weight vectors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratios: Option<Vec<Vec<f64>>>,
    /// ratio: total blocks; defaults to the base config's total.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,

    /// stage_count: stage counts to try, default 2..=5.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_counts: Option<Vec<usize>>,
    /// stage_count: MAC target; defaults to the base config at `input_size`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_macs: Option<u64>,

    /// block_multiplier: factors applied to one stage at a time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multipliers: Option<Vec<usize>>,

    /// attention: tail counts, default `0..=min(4, blocks)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_tails: Option<Vec<usize>>,
    /// attention: 0-based stage receiving the tail.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_stage: Option<usize>,

    /// resolution: `full_resolution` values, default both.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_resolution: Option<Vec<bool>>,
}

impl GridSpec {
    pub fn new(kind: GridKind) -> Self {
        Self {
            kind,
            seeds: default_seeds(),
            recipe: TrainRecipe::default(),
            input_size: default_input_size(),
            ratios: None,
            budget: None,
            stage_counts: None,
            target_macs: None,
            multipliers: None,
            attention_tails: None,
            attention_stage: None,
            full_resolution: None,
        }
    }

    pub fn from_value(v: Value) -> Result<Self> {
        serde_json::from_value(v).map_err(|e| Error::Config(format!("grid section: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(Error::Config("grid.seeds must be at least 1".into()));
        }
        if self.input_size == 0 {
            return Err(Error::Config("grid.input_size must be positive".into()));
        }
        Ok(())
    }
}

/// Splits `budget` blocks over `weights` by the largest-remainder method
/// (ties to the lower index), then lifts empty stages to one block by taking
/// from the currently largest stage. Conserves the budget whenever
/// `budget ≥ weights.len()`.
pub fn ratio_blocks(weights: &[f64], budget: usize) -> Result<Vec<usize>> {
    let s = weights.len();
    if s == 0 || weights.iter().any(|&w| !(w.is_finite() && w > 0.0)) {
        return Err(Error::Config(format!("ratio weights must be positive, got {weights:?}")));
    }
    if budget < s {
        return Err(Error::Config(format!("budget {budget} cannot give {s} stages one block each")));
    }
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| budget as f64 * w / total).collect();
    let mut blocks: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = blocks.iter().sum();
    let mut order: Vec<usize> = (0..s).collect();
    // stable sort keeps the lower index first among equal remainders
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())));
    for &i in order.iter().take(budget.saturating_sub(assigned)) {
        blocks[i] += 1;
    }
    while let Some(empty) = blocks.iter().position(|&b| b == 0) {
        let largest = (0..s).max_by(|&a, &b| blocks[a].cmp(&blocks[b]).then(b.cmp(&a))).expect("non-empty");
        blocks[largest] -= 1;
        blocks[empty] = 1;
    }
    Ok(blocks)
}

/// Stage list of length `s`: a prefix of `base`, or `base` extended by
/// copies of its last stage without attention.
pub fn resize_stages(base: &[StageConfig], s: usize) -> Vec<StageConfig> {
    let mut out: Vec<StageConfig> = base.iter().take(s).cloned().collect();
    if let Some(last) = base.last() {
        while out.len() < s {
            out.push(StageConfig {
                attention_tail: 0,
                ..last.clone()
            });
        }
    }
    out
}

fn joined(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("-")
}

/// Expands a grid into validated model configs, in a fixed order.
pub fn expand_grid(spec: &GridSpec, base: &ModelConfig) -> Result<Vec<ModelConfig>> {
    spec.validate()?;
    let s = base.stage_count();
    let mut out = Vec::new();
    let derive = |suffix: String| {
        let mut c = base.clone();
        c.name = format!("{}-{suffix}", base.name);
        c
    };
    match spec.kind {
        GridKind::Ratio => {
            let ratios: Vec<Vec<f64>> = spec.ratios.clone().unwrap_or_else(|| {
                DEFAULT_RATIOS
                    .iter()
                    .map(|r| r.iter().map(|&x| x as f64).collect())
                    .collect()
            });
            let budget = spec.budget.unwrap_or_else(|| base.blocks().iter().sum());
            for w in &ratios {
                if w.len() != s {
                    return Err(Error::Config(format!("ratio {w:?} has {} entries for {s} stages", w.len())));
                }
                let blocks = ratio_blocks(w, budget)?;
                let mut c = derive(format!("ratio-{}", joined(&blocks)));
                for (st, b) in c.stages.iter_mut().zip(&blocks) {
                    st.blocks = *b;
                }
                out.push(c);
            }
        }
        GridKind::StageCount => {
            let opts = CostOptions::default();
            let n = spec.input_size;
            let target = match spec.target_macs {
                Some(t) => t,
                None => count_macs(base, 1, n, n, opts)?.totals.macs,
            };
            let counts = spec
                .stage_counts
                .clone()
                .unwrap_or_else(|| (MIN_STAGES..=MAX_STAGES).collect());
            for k in counts {
                let mut template = base.clone();
                template.stages = resize_stages(&base.stages, k);
                // the base block counts, resized the same way, are the weights
                let weights: Vec<f64> = template.stages.iter().map(|st| st.blocks.max(1) as f64).collect();
                let sol = iso_complexity_blocks(&template, &weights, target, n, n, opts)?;
                for (st, b) in template.stages.iter_mut().zip(&sol.blocks) {
                    st.blocks = *b;
                }
                template.name = format!("{}-stages{k}-{}", base.name, joined(&sol.blocks));
                out.push(template);
            }
        }
        GridKind::BlockMultiplier => {
            let factors = spec.multipliers.clone().unwrap_or_else(|| DEFAULT_MULTIPLIERS.to_vec());
            for i in 0..s {
                for &f in &factors {
                    if f == 0 {
                        return Err(Error::Config("block multipliers must be at least 1".into()));
                    }
                    let mut c = derive(format!("stage{}x{f}", i + 1));
                    c.stages[i].blocks *= f;
                    out.push(c);
                }
            }
        }
        GridKind::Attention => {
            let stage = spec.attention_stage.unwrap_or(DEFAULT_ATTENTION_STAGE);
            if stage >= s {
                return Err(Error::Config(format!("attention stage {stage} does not exist in {s} stages")));
            }
            let tails = spec
                .attention_tails
                .clone()
                .unwrap_or_else(|| (0..=base.stages[stage].blocks.min(4)).collect());
            for t in tails {
                let mut c = derive(format!("attn{}-{t}", stage + 1));
                for st in &mut c.stages {
                    st.attention_tail = 0;
                }
                c.stages[stage].attention_tail = t;
                out.push(c);
            }
        }
        GridKind::Resolution => {
            for full in spec.full_resolution.clone().unwrap_or_else(|| vec![false, true]) {
                let mut c = derive(if full { "full-res".into() } else { "stem".into() });
                c.full_resolution = full;
                out.push(c);
            }
        }
    }
    out.into_iter().map(ModelConfig::validated).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::variant_preset;

    #[test]
    fn ratio_examples() {
        assert_eq!(ratio_blocks(&[1.0, 7.0, 4.0, 1.0], 13).unwrap(), [1, 7, 4, 1]);
        assert_eq!(ratio_blocks(&[1.0, 7.0, 4.0, 1.0], 26).unwrap(), [2, 14, 8, 2]);
        // quotas 3.25 each: the single leftover goes to the first stage
        assert_eq!(ratio_blocks(&[1.0; 4], 13).unwrap(), [4, 3, 3, 3]);
        // (100,1,1,1) at 4: quotas 3.88, 0.04.. → (4,0,0,0), then lifted
        assert_eq!(ratio_blocks(&[100.0, 1.0, 1.0, 1.0], 4).unwrap(), [1, 1, 1, 1]);
        assert!(ratio_blocks(&[1.0; 4], 3).is_err());
    }

    #[test]
    fn multiplier_grid_has_twelve_configs() {
        let base = variant_preset("small").unwrap();
        let cfgs = expand_grid(&GridSpec::new(GridKind::BlockMultiplier), &base).unwrap();
        assert_eq!(cfgs.len(), 12);
        assert_eq!(cfgs[1].blocks(), [4, 7, 4, 1]);
        assert_eq!(cfgs[11].blocks(), [1, 7, 4, 6]);
    }

    #[test]
    fn ratio_grid_defaults() {
        let base = variant_preset("small").unwrap();
        let cfgs = expand_grid(&GridSpec::new(GridKind::Ratio), &base).unwrap();
        assert_eq!(cfgs.len(), 5);
        assert!(cfgs.iter().all(|c| c.blocks().iter().sum::<usize>() == 13));
        assert_eq!(cfgs[2].blocks(), [1, 7, 4, 1]);
    }

    #[test]
    fn attention_and_resolution_grids() {
        let base = variant_preset("tiny").unwrap();
        let cfgs = expand_grid(&GridSpec::new(GridKind::Attention), &base).unwrap();
        assert_eq!(cfgs.iter().map(|c| c.stages[2].attention_tail).collect::<Vec<_>>(), [0, 1, 2]);
        let cfgs = expand_grid(&GridSpec::new(GridKind::Resolution), &base).unwrap();
        assert_eq!(cfgs.iter().map(|c| c.full_resolution).collect::<Vec<_>>(), [false, true]);
    }

    #[test]
    fn stage_count_grid_is_iso_complexity() {
        let base = variant_preset("small").unwrap().scaled_widths(8);
        let mut spec = GridSpec::new(GridKind::StageCount);
        spec.input_size = 128;
        let target = count_macs(&base, 1, 128, 128, CostOptions::default()).unwrap().totals.macs;
        let cfgs = expand_grid(&spec, &base).unwrap();
        assert_eq!(cfgs.iter().map(|c| c.stage_count()).collect::<Vec<_>>(), [2, 3, 4, 5]);
        for c in &cfgs {
            let m = count_macs(c, 1, 128, 128, CostOptions::default()).unwrap().totals.macs;
            assert!((m as f64 - target as f64).abs() <= 0.05 * target as f64, "{}: {m} vs {target}", c.name);
        }
        assert_eq!(cfgs[2].blocks(), [1, 7, 4, 1]);
    }

    #[test]
    fn infeasible_target_names_floor() {
        let base = variant_preset("small").unwrap();
        let mut spec = GridSpec::new(GridKind::StageCount);
        spec.target_macs = Some(1);
        assert!(matches!(expand_grid(&spec, &base), Err(Error::Infeasible { target: 1, .. })));
    }

    #[test]
    fn zero_seeds_rejected() {
        let mut spec = GridSpec::new(GridKind::Resolution);
        spec.seeds = 0;
        assert!(expand_grid(&spec, &variant_preset("tiny").unwrap()).unwrap_err().is_config());
    }
}
