//! Epoch-indexed schedules for the masking ratio, the entropy weights and the
//! learning rate. Epochs are fractional: step `s` of an epoch with `n` steps
//! sits at `epoch + s / n`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::losses::LossWeights;

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub warmup_epochs: f64,
    /// End of the annealing phase; cooldown epochs follow it.
    pub total_epochs: f64,
    pub cooldown_epochs: f64,
    pub mask_ratio_init: f64,
    pub lw_init_pixel: f64,
    pub lw_final_pixel: f64,
    pub lw_init_object: f64,
    pub lw_final_object: f64,
    pub lr_start: f64,
    pub lr_base: f64,
    pub lr_min: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 10.0,
            total_epochs: 300.0,
            cooldown_epochs: 30.0,
            mask_ratio_init: 0.75,
            lw_init_pixel: 1e-4,
            lw_final_pixel: 3e-3,
            lw_init_object: 1e-4,
            lw_final_object: 1e-2,
            lr_start: 1e-5,
            lr_base: 5e-4,
            lr_min: 1e-5,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.total_epochs) {
            return Err(Error::Config(format!(
                "schedule.warmup_epochs ({}) must be in [0, total_epochs = {})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.cooldown_epochs < 0.0 {
            return Err(Error::Config("schedule.cooldown_epochs must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio_init) {
            return Err(Error::Config("schedule.mask_ratio_init must be in [0, 1)".into()));
        }
        let weights = [self.lw_init_pixel, self.lw_final_pixel, self.lw_init_object, self.lw_final_object];
        if weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Whole epochs in a complete run, cooldown included.
    pub fn run_epochs(&self) -> usize {
        (self.total_epochs + self.cooldown_epochs).ceil() as usize
    }

    /// Position within the annealing phase, 0 at the end of warmup and 1 at `total_epochs`.
    fn progress(&self, epoch: f64) -> f64 {
        ((epoch - self.warmup_epochs) / (self.total_epochs - self.warmup_epochs)).clamp(0.0, 1.0)
    }
}

/// Held at its initial value through warmup, then linear to zero at `total_epochs`.
pub fn mask_ratio_at(epoch: f64, cfg: &ScheduleConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        cfg.mask_ratio_init
    } else if epoch >= cfg.total_epochs {
        0.0
    } else {
        cfg.mask_ratio_init * (cfg.total_epochs - epoch) / (cfg.total_epochs - cfg.warmup_epochs)
    }
}

/// Held at the initial weights through warmup, then linear to the final weights.
pub fn loss_weights_at(epoch: f64, cfg: &ScheduleConfig) -> LossWeights {
    if epoch < cfg.warmup_epochs {
        return LossWeights { lambda_pixel: cfg.lw_init_pixel, lambda_object: cfg.lw_init_object };
    }
    if epoch >= cfg.total_epochs {
        return LossWeights { lambda_pixel: cfg.lw_final_pixel, lambda_object: cfg.lw_final_object };
    }
    let t = cfg.progress(epoch);
    LossWeights {
        lambda_pixel: cfg.lw_init_pixel + (cfg.lw_final_pixel - cfg.lw_init_pixel) * t,
        lambda_object: cfg.lw_init_object + (cfg.lw_final_object - cfg.lw_init_object) * t,
    }
}

/// Linear warmup, half-cycle cosine down to `lr_min` at `total_epochs`, then flat.
pub fn lr_at(epoch: f64, cfg: &ScheduleConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        cfg.lr_start + (cfg.lr_base - cfg.lr_start) * epoch / cfg.warmup_epochs
    } else if epoch >= cfg.total_epochs {
        cfg.lr_min
    } else {
        let t = cfg.progress(epoch);
        cfg.lr_min + (cfg.lr_base - cfg.lr_min) * 0.5 * (1.0 + (PI * t).cos())
    }
}

/// All scheduled quantities at one (fractional) epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleState {
    pub epoch: f64,
    pub mask_ratio: f64,
    pub weights: LossWeights,
    pub lr: f64,
}

pub fn schedule_at(epoch: f64, cfg: &ScheduleConfig) -> ScheduleState {
    ScheduleState {
        epoch,
        mask_ratio: mask_ratio_at(epoch, cfg),
        weights: loss_weights_at(epoch, cfg),
        lr: lr_at(epoch, cfg),
    }
}
