use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{count_macs, count_params, receptive_field_analytic, CostOptions, FieldSize};
use crate::error::{Error, Result};
use crate::model::{Head, ModelConfig, StageConfig};
use crate::training::{train_loop, TrainRecipe, TrainReport};

use super::grid::{expand_grid, GridSpec};

/// One row of a grid's results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_id: String,
    pub blocks: Vec<usize>,
    pub lk_channels: Vec<usize>,
    pub lc_channels: Vec<usize>,
    pub attention_tail: Vec<usize>,
    pub full_resolution: bool,
    pub params: u64,
    pub macs: u64,
    pub rf_final: FieldSize,
    /// Mean over the seeds whose final loss is finite; NaN if none is.
    pub final_loss_mean: f64,
    /// Population standard deviation over the same seeds.
    pub final_loss_std: f64,
    pub diverged: bool,
    pub wall_seconds: f64,
    pub seeds: usize,
}

impl RunRecord {
    /// The trained config, rebuilt from the row (3 input channels, heatmap
    /// head). Its [`config_id`] equals the row's.
    pub fn config(&self) -> ModelConfig {
        let stages = (0..self.blocks.len())
            .map(|i| StageConfig {
                blocks: self.blocks[i],
                lk_channels: self.lk_channels.get(i).copied().unwrap_or(0),
                lc_channels: self.lc_channels.get(i).copied().unwrap_or(0),
                attention_tail: self.attention_tail.get(i).copied().unwrap_or(0),
            })
            .collect();
        ModelConfig {
            name: self.config_id.clone(),
            stages,
            input_channels: 3,
            full_resolution: self.full_resolution,
            head: Head::Heatmap,
        }
    }

    /// Equality ignoring `wall_seconds`; NaN losses compare equal.
    pub fn same_results(&self, other: &RunRecord) -> bool {
        let f = |a: f64, b: f64| a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan());
        RunRecord {
            wall_seconds: 0.0,
            final_loss_mean: 0.0,
            final_loss_std: 0.0,
            ..self.clone()
        } == RunRecord {
            wall_seconds: 0.0,
            final_loss_mean: 0.0,
            final_loss_std: 0.0,
            ..other.clone()
        } && f(self.final_loss_mean, other.final_loss_mean)
            && f(self.final_loss_std, other.final_loss_std)
    }
}

/// First 16 hex digits of the SHA-256 of the config's JSON form with the
/// name cleared, so renamed copies of one architecture share an id.
pub fn config_id(cfg: &ModelConfig) -> String {
    let anon = ModelConfig {
        name: String::new(),
        ..cfg.clone()
    };
    let json = serde_json::to_string(&anon).expect("configs always serialize");
    hex::encode(&Sha256::digest(json.as_bytes())[..8])
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Static analysis plus training reports folded into one record.
pub fn aggregate(cfg: &ModelConfig, input_size: usize, runs: &[(TrainReport, f64)]) -> Result<RunRecord> {
    let macs = count_macs(cfg, 1, input_size, input_size, CostOptions::default())?.totals.macs;
    let finite: Vec<f64> = runs.iter().filter_map(|(r, _)| r.final_loss).collect();
    let (mean, std) = mean_std(&finite);
    let col = |f: fn(&StageConfig) -> usize| cfg.stages.iter().map(f).collect::<Vec<_>>();
    Ok(RunRecord {
        config_id: config_id(cfg),
        blocks: col(|s| s.blocks),
        lk_channels: col(|s| s.lk_channels),
        lc_channels: col(|s| s.lc_channels),
        attention_tail: col(|s| s.attention_tail),
        full_resolution: cfg.full_resolution,
        params: count_params(cfg),
        macs,
        rf_final: receptive_field_analytic(cfg).final_output,
        // a single seed has no spread, even through rounding
        final_loss_std: if finite.len() == 1 { 0.0 } else { std },
        final_loss_mean: mean,
        diverged: runs.iter().any(|(r, _)| r.diverged),
        wall_seconds: runs.iter().map(|(_, s)| s).sum(),
        seeds: runs.len(),
    })
}

/// Configs a grid trains: the expansion with the heatmap head attached.
pub fn grid_configs(spec: &GridSpec, base: &ModelConfig) -> Result<Vec<ModelConfig>> {
    Ok(expand_grid(spec, base)?
        .into_iter()
        .map(|mut c| {
            c.head = Head::Heatmap;
            c
        })
        .collect())
}

/// Trains every config of the grid for `spec.seeds` seeds on a pool of at
/// most `jobs` threads. Records come back sorted by `config_id`.
pub fn run_grid(spec: &GridSpec, base: &ModelConfig, jobs: usize) -> Result<Vec<RunRecord>> {
    let configs = grid_configs(spec, base)?;
    let tasks: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|c| (0..spec.seeds as u64).map(move |s| (c, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::State(format!("worker pool: {e}")))?;
    let results: Vec<Result<(TrainReport, f64)>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(c, s)| {
                let recipe = TrainRecipe {
                    seed: spec.recipe.seed.wrapping_add(s),
                    ..spec.recipe
                };
                let start = Instant::now();
                let report = train_loop::<f32>(&configs[c], &recipe)?;
                Ok((report, start.elapsed().as_secs_f64()))
            })
            .collect()
    });
    let mut per_config: Vec<Vec<(TrainReport, f64)>> = vec![Vec::new(); configs.len()];
    for ((c, _), r) in tasks.iter().zip(results) {
        per_config[*c].push(r?);
    }
    let mut records = configs
        .iter()
        .zip(&per_config)
        .map(|(cfg, runs)| aggregate(cfg, spec.input_size, runs))
        .collect::<Result<Vec<_>>>()?;
    records.sort_by(|a, b| a.config_id.cmp(&b.config_id));
    Ok(records)
}
