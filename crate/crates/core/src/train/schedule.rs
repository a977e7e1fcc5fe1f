//! Linear warm-up followed by cosine decay to zero.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    /// Warm-up length as a fraction of the total step count.
    pub warmup_steps: f64,
    /// Learning-rate multiplier at step 0.
    pub start_factor: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            warmup_steps: 0.1,
            start_factor: 0.1,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_steps > 0.0 && self.warmup_steps < 1.0) {
            return Err(Error::Config(format!("warmup_steps {} outside (0, 1)", self.warmup_steps)));
        }
        if !(self.start_factor > 0.0 && self.start_factor <= 1.0) {
            return Err(Error::Config(format!("start_factor {} outside (0, 1]", self.start_factor)));
        }
        Ok(())
    }

    /// Number of warm-up steps for a run of `total_steps`.
    pub fn warmup_len(&self, total_steps: u64) -> u64 {
        (self.warmup_steps * total_steps as f64).round() as u64
    }

    /// Learning rate at step `t` of `total_steps`, peaking at `lr`.
    pub fn lr_at_step(&self, t: u64, total_steps: u64, lr: f64) -> Result<f64> {
        if t > total_steps {
            return Err(Error::Contract(format!("step {t} beyond total_steps {total_steps}")));
        }
        let warmup = self.warmup_len(total_steps);
        if t < warmup {
            let frac = t as f64 / warmup as f64;
            return Ok(lr * (self.start_factor + (1.0 - self.start_factor) * frac));
        }
        let span = total_steps - warmup;
        if span == 0 {
            return Ok(lr);
        }
        let progress = (t - warmup) as f64 / span as f64;
        Ok(lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}
