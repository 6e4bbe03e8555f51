use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::default_heads;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub blocks: usize,
    pub lk_channels: usize,
    pub lc_channels: usize,
    /// Number of trailing blocks that are hybrid (attention) blocks.
    #[serde(default)]
    pub attention_tail: usize,
}

impl StageConfig {
    pub fn new(blocks: usize, lk_channels: usize, lc_channels: usize) -> Self {
        Self {
            blocks,
            lk_channels,
            lc_channels,
            attention_tail: 0,
        }
    }

    pub fn conv_blocks(&self) -> usize {
        self.blocks.saturating_sub(self.attention_tail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    #[default]
    None,
    /// 1×1 convolution to a single channel on the merged output.
    Heatmap,
}

fn default_input_channels() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub stages: Vec<StageConfig>,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    /// Drops the stem so the stages run at twice the spatial resolution.
    #[serde(default)]
    pub full_resolution: bool,
    #[serde(default)]
    pub head: Head,
}

pub const MIN_STAGES: usize = 2;
pub const MAX_STAGES: usize = 5;

/// Stage index receiving attention when a sweep does not say otherwise.
pub const DEFAULT_ATTENTION_STAGE: usize = 2;

/// The stage compute ratio the presets are scaled from.
pub const REFERENCE_RATIO: [usize; 4] = [1, 7, 4, 1];

pub const PRESET_NAMES: [&str; 4] = ["tiny", "small", "base", "large"];

/// Table of scaled model configurations.
pub fn variant_preset(name: &str) -> Result<ModelConfig> {
    let (blocks, lk, lc): ([usize; 4], [usize; 4], [usize; 4]) = match name {
        "tiny" => ([1, 5, 2, 1], [64; 4], [64, 128, 256, 128]),
        "small" => ([1, 7, 4, 1], [64; 4], [64, 128, 256, 128]),
        "base" => ([2, 14, 8, 2], [128; 4], [128, 256, 512, 256]),
        "large" => ([4, 28, 16, 4], [128, 128, 256, 128], [128, 320, 512, 256]),
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok(ModelConfig {
        name: name.to_string(),
        stages: (0..4).map(|i| StageConfig::new(blocks[i], lk[i], lc[i])).collect(),
        input_channels: 3,
        full_resolution: false,
        head: Head::None,
    })
}

/// One failed invariant, addressed by a dotted field path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Checks every config invariant; an empty list means valid.
pub fn validate_config(cfg: &ModelConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |path: String, message: String| out.push(Violation { path, message });
    if cfg.name.trim().is_empty() {
        push("name".into(), "must not be empty".into());
    }
    if cfg.input_channels == 0 {
        push("input_channels".into(), "must be at least 1".into());
    }
    let n = cfg.stages.len();
    if !(MIN_STAGES..=MAX_STAGES).contains(&n) {
        push(
            "stages".into(),
            format!("stage count {n} is outside the supported range [{MIN_STAGES}, {MAX_STAGES}]"),
        );
    }
    for (i, s) in cfg.stages.iter().enumerate() {
        let p = |f: &str| format!("stages.{i}.{f}");
        if s.blocks == 0 {
            push(p("blocks"), "must be at least 1".into());
        }
        if s.lk_channels == 0 {
            push(p("lk_channels"), "must be at least 1".into());
        }
        if s.lc_channels == 0 {
            push(p("lc_channels"), "must be at least 1".into());
        }
        if s.lk_channels > s.lc_channels {
            push(
                p("lk_channels"),
                format!(
                    "bottleneck width {} exceeds stage width {}",
                    s.lk_channels, s.lc_channels
                ),
            );
        }
        if s.attention_tail > s.blocks {
            push(
                p("attention_tail"),
                format!("{} attention blocks exceed the stage's {} blocks", s.attention_tail, s.blocks),
            );
        }
        if s.attention_tail > 0 && s.lc_channels > 0 && s.lc_channels % default_heads(s.lc_channels) != 0 {
            push(p("lc_channels"), "not divisible by the attention head count".into());
        }
    }
    let with_attention: Vec<usize> = cfg
        .stages
        .iter()
        .enumerate()
        .filter(|(_, s)| s.attention_tail > 0)
        .map(|(i, _)| i)
        .collect();
    if with_attention.len() > 1 {
        push(
            "stages".into(),
            format!("attention may appear in only one stage, found it in stages {with_attention:?}"),
        );
    }
    out
}

impl ModelConfig {
    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn has_stem(&self) -> bool {
        !self.full_resolution
    }

    /// Skip projections from stages 2 and 3 exist only in the 4-stage layout.
    pub fn has_skips(&self) -> bool {
        self.stages.len() == 4
    }

    /// Total spatial reduction `2^(stages + stem)`.
    pub fn reduction(&self) -> usize {
        1usize << (self.stages.len() + usize::from(self.has_stem()))
    }

    pub fn blocks(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.blocks).collect()
    }

    pub fn final_width(&self) -> usize {
        self.stages.last().map_or(0, |s| s.lc_channels)
    }

    pub fn has_attention(&self) -> bool {
        self.stages.iter().any(|s| s.attention_tail > 0)
    }

    /// Divides every channel count by `divisor` (floor, minimum 1).
    pub fn scaled_widths(&self, divisor: usize) -> ModelConfig {
        let d = divisor.max(1);
        let mut out = self.clone();
        for s in &mut out.stages {
            s.lk_channels = (s.lk_channels / d).max(1);
            s.lc_channels = (s.lc_channels / d).max(1);
        }
        if d > 1 {
            out.name = format!("{}-w{d}", self.name);
        }
        out
    }

    pub fn validated(self) -> Result<Self> {
        let v = validate_config(&self);
        if v.is_empty() {
            Ok(self)
        } else {
            Err(Error::Invalid(v))
        }
    }
}
