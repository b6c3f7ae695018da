use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Linear warm-up from 0 to `peak`, then linear decay back to 0 at
/// `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub peak: f64,
    pub total_steps: u64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
}

fn default_warmup() -> f64 {
    0.08
}

impl LrSchedule {
    pub fn new(peak: f64, total_steps: u64) -> Result<Self> {
        Self::with_warmup(peak, total_steps, default_warmup())
    }

    pub fn with_warmup(peak: f64, total_steps: u64, warmup_fraction: f64) -> Result<Self> {
        let s = Self { peak, total_steps, warmup_fraction };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak > 0.0 && self.peak.is_finite()) {
            return Err(invalid!("peak learning rate must be positive, got {}", self.peak));
        }
        if self.total_steps == 0 {
            return Err(invalid!("schedule needs at least one step"));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(invalid!("warmup fraction must lie in (0,1), got {}", self.warmup_fraction));
        }
        Ok(())
    }

    /// Step at which the schedule peaks: `floor(warmup_fraction · total)`.
    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.total_steps as f64).floor() as u64
    }

    pub fn lr_at_step(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(invalid!("step {step} beyond schedule of {} steps", self.total_steps));
        }
        let w = self.warmup_steps();
        let lr = if step <= w {
            // w == 0 only leaves step 0 here, which is pinned to 0
            if w == 0 {
                0.0
            } else {
                self.peak * step as f64 / w as f64
            }
        } else {
            self.peak * (self.total_steps - step) as f64 / (self.total_steps - w) as f64
        };
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_decay() {
        let s = LrSchedule::new(5e-4, 1000).unwrap();
        assert_eq!(s.warmup_steps(), 80);
        assert_eq!(s.lr_at_step(0).unwrap(), 0.0);
        assert!((s.lr_at_step(80).unwrap() - 5e-4).abs() < 1e-15);
        assert!((s.lr_at_step(40).unwrap() - 2.5e-4).abs() < 1e-15);
        assert!((s.lr_at_step(540).unwrap() - 2.5e-4).abs() < 1e-15);
        assert_eq!(s.lr_at_step(1000).unwrap(), 0.0);
        assert!(s.lr_at_step(1001).is_err());
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(LrSchedule::new(0.0, 10).is_err());
        assert!(LrSchedule::new(1e-3, 0).is_err());
        assert!(LrSchedule::with_warmup(1e-3, 10, 1.0).is_err());
    }
}
