//! Learning-rate schedule: linear warmup from zero to the peak, then linear
//! decay to zero at the final step.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, warmup_steps: u64, max_steps: u64) -> Result<Self> {
        let s = LrSchedule {
            peak_lr,
            warmup_steps,
            max_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::Config(format!(
                "peak learning rate {} must be positive",
                self.peak_lr
            )));
        }
        if !(0 < self.warmup_steps && self.warmup_steps < self.max_steps) {
            return Err(Error::Config(format!(
                "need 0 < warmup ({}) < max steps ({})",
                self.warmup_steps, self.max_steps
            )));
        }
        Ok(())
    }
}

/// The learning rate at `step`: `peak * step / warmup` through the warmup,
/// `peak * (max - step) / (max - warmup)` after it, and zero from `max_steps`
/// on (steps past the end clamp to zero rather than going negative).
pub fn lr_at(step: u64, sched: &LrSchedule) -> f64 {
    if step >= sched.max_steps {
        return 0.0;
    }
    if step <= sched.warmup_steps {
        return sched.peak_lr * step as f64 / sched.warmup_steps as f64;
    }
    sched.peak_lr * (sched.max_steps - step) as f64
        / (sched.max_steps - sched.warmup_steps) as f64
}
