use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup from zero to `peak_lr`, then constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if !(peak_lr > 0.0 && peak_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("peak_lr must be positive, got {peak_lr}")));
        }
        if warmup_steps > total_steps {
            return Err(Error::InvalidConfig(format!(
                "warmup_steps {warmup_steps} exceeds total_steps {total_steps}"
            )));
        }
        Ok(Self { peak_lr, warmup_steps, total_steps })
    }

    /// Warmup over `round(fraction * total_steps)` steps.
    pub fn with_warmup_fraction(peak_lr: f64, fraction: f64, total_steps: usize) -> Result<Self> {
        let warmup = (fraction * total_steps as f64).round() as usize;
        Self::new(peak_lr, warmup.min(total_steps), total_steps)
    }
}

/// Learning rate at `step`.
pub fn lr_at(schedule: &LrSchedule, step: usize) -> Result<f64> {
    if step > schedule.total_steps {
        return Err(Error::StepOutOfRange { step, total: schedule.total_steps });
    }
    if step < schedule.warmup_steps {
        Ok(schedule.peak_lr * step as f64 / schedule.warmup_steps as f64)
    } else {
        Ok(schedule.peak_lr)
    }
}
