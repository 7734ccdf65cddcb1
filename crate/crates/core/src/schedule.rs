//! One-cycle learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the one-cycle schedule: cosine warm-up from `initial_lr` to
/// `max_lr` over the first `warmup_fraction` of the steps, then cosine
/// annealing down to `initial_lr / final_div`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub initial_lr: f64,
    pub max_lr: f64,
    pub warmup_fraction: f64,
    pub final_div: f64,
}

impl OneCycle {
    pub fn new(initial_lr: f64, max_lr: f64) -> Self {
        OneCycle {
            initial_lr,
            max_lr,
            warmup_fraction: 0.3,
            final_div: 100.0,
        }
    }

    pub fn final_lr(&self) -> f64 {
        self.initial_lr / self.final_div
    }

    /// Index of the peak step for a run of `total_steps` (at least 2).
    /// With two steps there is no room for an interior peak and the
    /// schedule is just `[initial, final]`.
    pub fn peak_step(&self, total_steps: usize) -> usize {
        let raw = (self.warmup_fraction * total_steps as f64).round() as usize;
        if total_steps <= 2 {
            0
        } else {
            raw.clamp(1, total_steps - 2)
        }
    }

    pub fn lr(&self, step: usize, total_steps: usize) -> Result<f64> {
        if total_steps < 2 {
            return Err(Error::usage(format!(
                "one-cycle schedule needs at least 2 steps, got {total_steps}"
            )));
        }
        if step >= total_steps {
            return Err(Error::usage(format!(
                "step {step} outside schedule of {total_steps} steps"
            )));
        }
        let peak = self.peak_step(total_steps);
        let last = total_steps - 1;
        if total_steps == 2 {
            return Ok(if step == 0 { self.initial_lr } else { self.final_lr() });
        }
        if step <= peak {
            let t = step as f64 / peak as f64;
            Ok(self.initial_lr + (self.max_lr - self.initial_lr) * (1.0 - (PI * t).cos()) / 2.0)
        } else {
            let t = (step - peak) as f64 / (last - peak) as f64;
            let fin = self.final_lr();
            Ok(fin + (self.max_lr - fin) * (1.0 + (PI * t).cos()) / 2.0)
        }
    }
}

/// Learning rate at `step` of a `total_steps` one-cycle run with the
/// default shape (30% warm-up, final rate `initial_lr / 100`).
pub fn one_cycle_lr(step: usize, total_steps: usize, initial_lr: f64, max_lr: f64) -> Result<f64> {
    OneCycle::new(initial_lr, max_lr).lr(step, total_steps)
}
