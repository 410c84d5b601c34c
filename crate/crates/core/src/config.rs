//! Run configuration: everything a training/evaluation run needs, loaded
//! from JSON with unknown keys rejected and every field range-checked
//! before any file is touched.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distances::DistanceMetric;
use crate::error::{Error, Result};
use crate::network::NetConfig;
use crate::supervision::LossWeights;
use crate::tensor::AdamHyper;

fn default_lr() -> f32 {
    1e-3
}
fn default_beta1() -> f32 {
    0.9
}
fn default_beta2() -> f32 {
    0.999
}
fn default_eps() -> f32 {
    1e-8
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_beta1")]
    pub beta1: f32,
    #[serde(default = "default_beta2")]
    pub beta2: f32,
    #[serde(default = "default_eps")]
    pub eps: f32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("optimizer.lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!(
                    "optimizer.{name} must lie in [0,1), got {b}"
                )));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "optimizer.eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.eps,
        }
    }
}

fn default_decay_factor() -> f32 {
    0.1
}
fn default_decay_every() -> u32 {
    60
}

/// Step learning-rate schedule: multiply by `factor` every `every` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_decay_factor")]
    pub factor: f32,
    #[serde(default = "default_decay_every")]
    pub every: u32,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            factor: default_decay_factor(),
            every: default_decay_every(),
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor <= 1.0) {
            return Err(Error::Config(format!(
                "schedule.factor must lie in (0,1], got {}",
                self.factor
            )));
        }
        if self.every == 0 {
            return Err(Error::Config("schedule.every must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate at a given epoch (0-indexed).
    pub fn lr_at(&self, base_lr: f32, epoch: u32) -> f32 {
        base_lr * self.factor.powi((epoch / self.every) as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default = "default_augment_enabled")]
    pub enabled: bool,
    /// Square crop size; `None` keeps the full extent.
    #[serde(default)]
    pub crop: Option<usize>,
}

fn default_augment_enabled() -> bool {
    true
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            crop: None,
        }
    }
}

/// Optional data/output paths; command-line flags take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default)]
    pub data: Option<String>,
    #[serde(default)]
    pub out: Option<String>,
}

fn default_batch_size() -> usize {
    16
}
fn default_epochs() -> u32 {
    60
}
fn default_threshold() -> f32 {
    0.5
}
fn default_gcd_metric() -> DistanceMetric {
    DistanceMetric::Softmatch
}

/// Full run configuration. The desk defaults (depth 3, 64px-scale data,
/// 60 epochs) keep CPU runs tractable; the full-scale regimen (depth 5,
/// 200 epochs) stays reachable through the same fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: u32,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_threshold")]
    pub threshold: f32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// Distance used by the GCD branch; the ablation harness swaps this.
    #[serde(default = "default_gcd_metric")]
    pub gcd_metric: DistanceMetric,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            net: NetConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            weights: LossWeights::default(),
            threshold: default_threshold(),
            seed: 0,
            augment: AugmentConfig::default(),
            gcd_metric: default_gcd_metric(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.optimizer.validate()?;
        self.schedule.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie in (0,1), got {}",
                self.threshold
            )));
        }
        if let Some(crop) = self.augment.crop {
            let d = self.net.input_divisor();
            if crop == 0 || crop % d != 0 {
                return Err(Error::Config(format!(
                    "augment.crop {crop} must be a positive multiple of {d} for depth {}",
                    self.net.depth
                )));
            }
        }
        Ok(())
    }

    /// Load and validate a config file. Unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }
}
