//! TOML run configuration. Every key is optional and falls back to the
//! defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::DetectorConfig;
use crate::error::{Error, Result};

/// Synthetic dataset sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training images (default 500).
    pub train_size: usize,
    /// Validation images (default 100).
    pub val_size: usize,
    /// Square image side in pixels (default 64).
    pub image_size: usize,
    /// Dataset seed; the run seed when absent.
    pub seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train_size: 500, val_size: 100, image_size: 64, seed: None }
    }
}

/// Optimizer and schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Fraction of the schedule after which the learning rate drops.
    pub lr_drop_fraction: f64,
    pub lr_drop_factor: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            epochs: 60,
            lr_drop_fraction: 0.8,
            lr_drop_factor: 0.1,
            batch_size: 8,
            clip_norm: 0.1,
            hflip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("train.lr", self.lr), ("train.eps", self.eps), ("train.lr_drop_factor", self.lr_drop_factor)];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be positive, got {v}")));
            }
        }
        for (field, v) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(field, format!("must lie in [0, 1), got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", format!("must be nonnegative, got {}", self.weight_decay)));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::config("train.clip_norm", format!("must be nonnegative, got {}", self.clip_norm)));
        }
        if !(self.lr_drop_fraction > 0.0 && self.lr_drop_fraction <= 1.0) {
            return Err(Error::config("train.lr_drop_fraction", format!("must lie in (0, 1], got {}", self.lr_drop_fraction)));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        Ok(())
    }

    /// First epoch (0-based) trained at the dropped rate.
    pub fn drop_epoch(&self) -> usize {
        ((self.epochs as f64 * self.lr_drop_fraction).round() as usize).min(self.epochs)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.drop_epoch() {
            self.lr * self.lr_drop_factor
        } else {
            self.lr
        }
    }
}

/// Evaluation and report settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Detections kept per image (default: every query).
    pub top_k: Option<usize>,
    /// Images used by the attention report (default 100).
    pub report_images: usize,
    /// Parameter coordinates probed per tensor by grad-check (default 4).
    pub grad_check_coords: usize,
    /// Finite-difference step (default 1e-6).
    pub grad_check_step: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { top_k: None, report_images: 100, grad_check_coords: 4, grad_check_step: 1e-6 }
    }
}

/// Complete run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: DetectorConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            model: DetectorConfig::multi_scale(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.train_size == 0 {
            return Err(Error::config("data.train_size", "must be at least 1"));
        }
        if self.data.image_size != self.model.backbone.image_size {
            return Err(Error::config(
                "data.image_size",
                format!("{} differs from model.backbone.image_size {}", self.data.image_size, self.model.backbone.image_size),
            ));
        }
        if self.eval.top_k == Some(0) {
            return Err(Error::config("eval.top_k", "must be at least 1"));
        }
        if !(1e-7..=1e-4).contains(&self.eval.grad_check_step) {
            return Err(Error::config("eval.grad_check_step", "must lie in [1e-7, 1e-4]"));
        }
        Ok(())
    }
}
