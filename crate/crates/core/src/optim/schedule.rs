use std::f64::consts::PI;

use super::{OptimError, Result};

/// Linear warmup from `warmup_start_lr` to `base_lr` over `warmup_steps`,
/// then half a cosine down to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_start_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl ScheduleConfig {
    pub fn new(
        base_lr: f64,
        warmup_start_lr: f64,
        warmup_steps: usize,
        total_steps: usize,
    ) -> Result<Self> {
        let s = Self {
            base_lr,
            warmup_start_lr,
            warmup_steps,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    /// Warmup covering 10% of `total_steps`.
    pub fn with_default_warmup(
        base_lr: f64,
        warmup_start_lr: f64,
        total_steps: usize,
    ) -> Result<Self> {
        Self::new(base_lr, warmup_start_lr, total_steps / 10, total_steps)
    }

    /// Peak 1e-4 reached from 3e-5 over 30 of 300 steps.
    pub fn paper_faithful() -> Self {
        Self::new(1e-4, 3e-5, 30, 300).expect("constants are valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(OptimError::Config(format!(
                "warmup {} must be below total steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.base_lr >= 0.0)
            || !(self.warmup_start_lr >= 0.0)
            || self.warmup_start_lr > self.base_lr
        {
            return Err(OptimError::Config(format!(
                "need 0 ≤ warmup_start_lr {} ≤ base_lr {}",
                self.warmup_start_lr, self.base_lr
            )));
        }
        Ok(())
    }
}

pub fn lr_at(s: &ScheduleConfig, t: usize) -> Result<f64> {
    if t > s.total_steps {
        return Err(OptimError::StepOutOfRange {
            t,
            total: s.total_steps,
        });
    }
    if t < s.warmup_steps {
        let frac = t as f64 / s.warmup_steps as f64;
        return Ok(s.warmup_start_lr + (s.base_lr - s.warmup_start_lr) * frac);
    }
    let progress = (t - s.warmup_steps) as f64 / (s.total_steps - s.warmup_steps) as f64;
    Ok(s.base_lr * 0.5 * (1.0 + (progress * PI).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors() {
        let s = ScheduleConfig::paper_faithful();
        assert_eq!(lr_at(&s, 0).unwrap(), 3e-5);
        assert_eq!(lr_at(&s, 30).unwrap(), 1e-4);
        assert!((lr_at(&s, 165).unwrap() - 0.5e-4).abs() < 1e-18);
        assert!(lr_at(&s, 300).unwrap() <= 1e-10 * 1e-4);
        assert!(lr_at(&s, 301).is_err());
    }

    #[test]
    fn warmup_is_continuous() {
        let s = ScheduleConfig::paper_faithful();
        let before = s.warmup_start_lr + (s.base_lr - s.warmup_start_lr) * (29.999_999_999 / 30.0);
        assert!((before - lr_at(&s, 30).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn invalid() {
        assert!(ScheduleConfig::new(1e-4, 3e-5, 10, 10).is_err());
        assert!(ScheduleConfig::new(1e-4, 2e-4, 1, 10).is_err());
        let s = ScheduleConfig::with_default_warmup(1.0, 0.0, 5).unwrap();
        assert_eq!(s.warmup_steps, 0);
        assert_eq!(lr_at(&s, 0).unwrap(), 1.0);
    }
}
