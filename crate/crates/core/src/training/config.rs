use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Result};
use crate::models::{Family, ModelConfig};
use crate::volume::AugmentConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopConfig {
    pub min_delta: f64,
    pub patience: usize,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        EarlyStopConfig {
            min_delta: 0.001,
            patience: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub physical_batch: usize,
    pub accumulation_steps: usize,
    pub max_epochs: usize,
    pub early_stop: EarlyStopConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Batch 16 × 8 accumulation, 50 epochs, AdamW (0.9, 0.999).
    fn default() -> Self {
        TrainConfig {
            lr_max: 1e-3,
            lr_min: 1e-6,
            weight_decay: 0.01,
            betas: [0.9, 0.999],
            eps: 1e-8,
            physical_batch: 16,
            accumulation_steps: 8,
            max_epochs: 50,
            early_stop: EarlyStopConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// CPU-sized schedule for phantom experiments: every micro-batch is an
    /// optimizer step, flips only.
    pub fn desk() -> Self {
        TrainConfig {
            physical_batch: 8,
            accumulation_steps: 1,
            max_epochs: 30,
            augment: AugmentConfig {
                rotate: false,
                deform: false,
                ..AugmentConfig::default()
            },
            ..Self::default()
        }
    }

    /// [`TrainConfig::desk`] with the family's learning rate: 5e-4 for Swin,
    /// whose loss oscillates at 1e-3 without warmup, 1e-3 otherwise.
    pub fn desk_for(model: &ModelConfig) -> Self {
        let lr_max = match model.family {
            Family::Swin => 5e-4,
            _ => 1e-3,
        };
        TrainConfig { lr_max, ..Self::desk() }
    }

    pub fn effective_batch(&self) -> usize {
        self.physical_batch * self.accumulation_steps
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_max", self.lr_max),
            ("eps", self.eps),
            ("min_delta", self.early_stop.min_delta),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lr_min >= 0.0) || self.lr_min > self.lr_max {
            return Err(invalid(format!("lr_min {} must lie in [0, lr_max]", self.lr_min)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid("weight decay must be non-negative"));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(invalid(format!("betas {:?} must lie in [0, 1)", self.betas)));
        }
        if self.physical_batch == 0 || self.accumulation_steps == 0 || self.max_epochs == 0 {
            return Err(invalid("batch, accumulation steps and epochs must be positive"));
        }
        if self.early_stop.patience == 0 {
            return Err(invalid("patience must be at least 1"));
        }
        self.augment.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }
}
