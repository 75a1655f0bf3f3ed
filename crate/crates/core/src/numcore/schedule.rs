use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup to `peak_lr`, then geometric decay reaching `final_lr` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.final_lr > 0.0 && self.peak_lr >= self.final_lr) {
            return Err(Error::Config(format!(
                "need peak_lr >= final_lr > 0, got {} / {}",
                self.peak_lr, self.final_lr
            )));
        }
        Ok(())
    }

    pub fn lr(&self, step: usize) -> f64 {
        schedule_lr(self, step)
    }
}

pub fn schedule_lr(s: &LrSchedule, step: usize) -> f64 {
    if step < s.warmup_steps {
        return s.peak_lr * step as f64 / s.warmup_steps as f64;
    }
    if step >= s.total_steps {
        return s.final_lr;
    }
    let frac = (step - s.warmup_steps) as f64 / (s.total_steps - s.warmup_steps) as f64;
    s.peak_lr * (s.final_lr / s.peak_lr).powf(frac)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn joint() -> LrSchedule {
        LrSchedule {
            peak_lr: 5e-4,
            final_lr: 5e-6,
            warmup_steps: 5000,
            total_steps: 250_000,
        }
    }

    #[test]
    fn encoder_peak_after_warmup() {
        let s = LrSchedule {
            peak_lr: 1e-3,
            final_lr: 1e-5,
            warmup_steps: 20_000,
            total_steps: 250_000,
        };
        assert_eq!(s.lr(20_000), 1e-3);
    }

    #[test]
    fn warmup_midpoint_and_endpoints() {
        let s = joint();
        assert!((s.lr(2500) - 2.5e-4).abs() < 1e-18);
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(250_000) - 5e-6).abs() < 1e-18);
        assert_eq!(s.lr(10_000_000), 5e-6);
    }

    #[test]
    fn continuous_at_warmup_and_non_increasing_after() {
        let s = joint();
        // the ramp extended to the boundary meets the decay branch exactly
        let ramp_at_boundary = s.peak_lr * s.warmup_steps as f64 / s.warmup_steps as f64;
        assert_eq!(ramp_at_boundary, s.lr(5000));
        assert!((s.lr(4999) - s.lr(5000)).abs() <= s.peak_lr / 5000.0 + 1e-18);
        let mut prev = s.lr(5000);
        for step in (5000..=260_000).step_by(997) {
            let cur = s.lr(step);
            assert!(cur <= prev + 1e-18);
            prev = cur;
        }
    }

    #[test]
    fn validation() {
        let mut s = joint();
        assert!(s.validate().is_ok());
        s.warmup_steps = s.total_steps;
        assert!(s.validate().is_err());
        let mut s = joint();
        s.final_lr = 1e-3;
        assert!(s.validate().is_err());
    }
}
