use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Mode, Module};
use crate::model::{build_network, Head, ModelConfig, Network};
use crate::tensor::{Element, SplitMix64, Tensor4};

use super::adam::{AdamConfig, AdamState};
use super::toy::{generate_toy_batch, mse, mse_grad, stack_batch, ToyTask};

fn default_steps() -> u64 {
    500
}
fn default_batch() -> usize {
    8
}
fn default_image() -> usize {
    64
}
fn default_objects() -> (usize, usize) {
    (1, 3)
}
fn default_side() -> (usize, usize) {
    (2, 4)
}

/// Everything a toy training run depends on besides the model config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRecipe {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_image")]
    pub image_size: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default = "default_objects")]
    pub objects: (usize, usize),
    #[serde(default = "default_side")]
    pub side: (usize, usize),
}

impl Default for TrainRecipe {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: default_steps(),
            batch_size: default_batch(),
            image_size: default_image(),
            optimizer: AdamConfig::default(),
            objects: default_objects(),
            side: default_side(),
        }
    }
}

impl TrainRecipe {
    pub fn task(&self, cfg: &ModelConfig) -> ToyTask {
        ToyTask {
            image_size: self.image_size,
            channels: cfg.input_channels,
            objects: self.objects,
            side: self.side,
            reduction: cfg.reduction(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: String,
    pub seed: u64,
    /// Steps actually taken.
    pub steps: u64,
    /// Training-batch loss before each update.
    pub loss_curve: Vec<f64>,
    /// Loss on the fixed evaluation batch before training.
    pub initial_loss: f64,
    /// Loss on the fixed evaluation batch after training; absent when it is
    /// not finite.
    pub final_loss: Option<f64>,
    pub diverged: bool,
    /// Parameter tensors whose update was skipped for non-finite gradients.
    pub skipped_updates: u64,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Mean of `loss_curve[i..i+window]`.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        if window == 0 || self.loss_curve.len() < window {
            return Vec::new();
        }
        self.loss_curve
            .windows(window)
            .map(|w| w.iter().sum::<f64>() / window as f64)
            .collect()
    }
}

const DATA_STREAM: u64 = 0x7261_696e;
const EVAL_STREAM: u64 = 0x6576_616c;

/// Batch-statistics loss on a fixed batch, computed on a copy so the
/// trained network's running statistics are untouched.
fn eval_loss<T: Element>(net: &Network<T>, images: &Tensor4<T>, targets: &Tensor4<T>) -> Result<f64> {
    let mut probe = net.clone();
    probe.set_mode(Mode::Train);
    let out = probe.forward(images)?;
    Ok(mse(&out.output, targets)?.as_f64())
}

/// Trains `cfg` on the toy heatmap task with Adam and warmup. Fully
/// determined by `cfg` and `recipe`.
pub fn train_loop<T: Element>(cfg: &ModelConfig, recipe: &TrainRecipe) -> Result<TrainReport> {
    if cfg.head != Head::Heatmap {
        return Err(Error::Config("toy training needs a config with head = \"heatmap\"".into()));
    }
    if recipe.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    recipe.optimizer.validate()?;
    let task = recipe.task(cfg);
    task.validate()?;
    let mut net: Network<T> = build_network(cfg, recipe.seed)?;
    net.set_mode(Mode::Train);
    let mut opt = AdamState::new(recipe.optimizer);

    let eval = generate_toy_batch::<T>(recipe.seed ^ EVAL_STREAM, recipe.batch_size, &task)?;
    let (eval_x, eval_y) = stack_batch(&eval)?;
    let initial_loss = eval_loss(&net, &eval_x, &eval_y)?;

    let mut data_rng = SplitMix64::new(recipe.seed ^ DATA_STREAM);
    let mut curve = Vec::with_capacity(recipe.steps as usize);
    let mut diverged = !initial_loss.is_finite();
    let mut skipped = 0;
    while !diverged && (curve.len() as u64) < recipe.steps {
        let batch = generate_toy_batch::<T>(data_rng.next_u64(), recipe.batch_size, &task)?;
        let (x, y) = stack_batch(&batch)?;
        let out = net.forward(&x)?;
        let loss = mse(&out.output, &y)?.as_f64();
        if !loss.is_finite() {
            diverged = true;
            break;
        }
        curve.push(loss);
        net.zero_grad();
        net.backward_accumulate(&mse_grad(&out.output, &y)?)?;
        skipped += opt.step(&mut net)?.len() as u64;
    }
    let final_loss = if curve.is_empty() && !diverged {
        initial_loss
    } else {
        eval_loss(&net, &eval_x, &eval_y)?
    };
    diverged |= !final_loss.is_finite();
    Ok(TrainReport {
        config: cfg.name.clone(),
        seed: recipe.seed,
        steps: curve.len() as u64,
        loss_curve: curve,
        initial_loss,
        final_loss: final_loss.is_finite().then_some(final_loss),
        diverged,
        skipped_updates: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::variant_preset;

    fn cfg() -> ModelConfig {
        let mut c = variant_preset("tiny").unwrap().scaled_widths(16);
        c.head = Head::Heatmap;
        c
    }

    #[test]
    fn zero_steps() {
        let r = train_loop::<f64>(&cfg(), &TrainRecipe { steps: 0, batch_size: 2, ..TrainRecipe::default() }).unwrap();
        assert!(r.loss_curve.is_empty());
        assert_eq!(r.final_loss, Some(r.initial_loss));
        assert!(!r.diverged);
    }

    #[test]
    fn deterministic() {
        let recipe = TrainRecipe {
            steps: 3,
            batch_size: 2,
            ..TrainRecipe::default()
        };
        let a = train_loop::<f64>(&cfg(), &recipe).unwrap();
        let b = train_loop::<f64>(&cfg(), &recipe).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.loss_curve.len(), 3);
    }

    #[test]
    fn needs_heatmap_head() {
        let mut c = cfg();
        c.head = Head::None;
        assert!(train_loop::<f32>(&c, &TrainRecipe::default()).unwrap_err().is_config());
    }

    #[test]
    fn huge_learning_rate_is_recorded_not_fatal() {
        let mut recipe = TrainRecipe {
            steps: 40,
            batch_size: 2,
            ..TrainRecipe::default()
        };
        recipe.optimizer.lr_max = 1e30;
        recipe.optimizer.warmup_steps = 1;
        let r = train_loop::<f32>(&cfg(), &recipe).unwrap();
        assert!(r.loss_curve.len() as u64 <= recipe.steps);
        if r.diverged {
            assert!(r.final_loss.is_none() || r.loss_curve.len() < 40);
        }
    }

    #[test]
    fn moving_average_window() {
        let r = TrainReport {
            config: "x".into(),
            seed: 0,
            steps: 4,
            loss_curve: vec![4.0, 2.0, 2.0, 0.0],
            initial_loss: 4.0,
            final_loss: Some(0.0),
            diverged: false,
            skipped_updates: 0,
        };
        assert_eq!(r.moving_average(2), vec![3.0, 2.0, 1.0]);
        assert!(r.moving_average(5).is_empty());
    }
}
