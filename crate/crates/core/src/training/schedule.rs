use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup to `peak_lr`, then cosine decay to exactly zero at
/// `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(peak_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if !(peak_lr > 0.0 && peak_lr.is_finite()) {
            return Err(Error::config(format!("peak_lr must be positive, got {peak_lr}")));
        }
        if warmup_steps == 0 || warmup_steps >= total_steps {
            return Err(Error::config(format!(
                "need 0 < warmup_steps < total_steps, got {warmup_steps} and {total_steps}"
            )));
        }
        Ok(Self {
            peak_lr,
            warmup_steps,
            total_steps,
        })
    }

    /// `peak·step/warmup` during warmup, otherwise
    /// `peak·½(1 + cos(π·(step − warmup)/(total − warmup)))`.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::contract(format!(
                "step {step} outside schedule of {} steps",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            return Ok(self.peak_lr * step as f64 / self.warmup_steps as f64);
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        if step == self.total_steps {
            return Ok(0.0);
        }
        Ok(self.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

pub fn lr_at(schedule: &Schedule, step: u64) -> Result<f64> {
    schedule.lr_at(step)
}

/// Warmup for a run shorter than the reference one: 5% of the total steps
/// (at least 1), never more than `reference` and always below `total`.
pub fn scaled_warmup(total_steps: u64, reference: u64) -> u64 {
    let five_percent = (total_steps as f64 * 0.05).ceil() as u64;
    five_percent.max(1).min(reference).min(total_steps.saturating_sub(1))
}
