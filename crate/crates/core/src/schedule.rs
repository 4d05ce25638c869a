//! Learning-rate schedules.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    CosineAnnealing,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, lr_max: f64, lr_min: f64, total_steps: u64) -> Result<Self> {
        let s = Self {
            kind,
            lr_max,
            lr_min,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(lr: f64, total_steps: u64) -> Result<Self> {
        Self::new(ScheduleKind::Constant, lr, 0.0, total_steps)
    }

    pub fn cosine(lr_max: f64, lr_min: f64, total_steps: u64) -> Result<Self> {
        Self::new(ScheduleKind::CosineAnnealing, lr_max, lr_min, total_steps)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.lr_min && self.lr_min <= self.lr_max) {
            return Err(Error::InvalidConfig(format!(
                "schedule needs 0 <= lr_min <= lr_max, got lr_min={} lr_max={}",
                self.lr_min, self.lr_max
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::InvalidConfig("schedule total_steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate at step `t`, for `0 <= t <= total_steps`.
    ///
    /// Cosine annealing is `lr_min + (lr_max - lr_min) * (1 + cos(pi t / T)) / 2`
    /// with the endpoints returned exactly.
    pub fn lr_at(&self, t: u64) -> Result<f64> {
        if t > self.total_steps {
            return Err(Error::OutOfRange {
                what: "schedule step",
                value: t as f64,
                limit: self.total_steps as f64,
            });
        }
        Ok(match self.kind {
            ScheduleKind::Constant => self.lr_max,
            ScheduleKind::CosineAnnealing => {
                if t == 0 {
                    self.lr_max
                } else if t == self.total_steps {
                    self.lr_min
                } else {
                    let phase = PI * t as f64 / self.total_steps as f64;
                    let lr = self.lr_min + (self.lr_max - self.lr_min) * (1.0 + phase.cos()) / 2.0;
                    lr.clamp(self.lr_min, self.lr_max)
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let s = Schedule::cosine(0.1, 0.0, 100).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 0.1);
        assert_eq!(s.lr_at(100).unwrap(), 0.0);
        assert!((s.lr_at(50).unwrap() - 0.05).abs() < 1e-15);

        let s = Schedule::cosine(0.3, 0.1, 10).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 0.3);
        assert_eq!(s.lr_at(10).unwrap(), 0.1);
        assert!((s.lr_at(5).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn constant_ignores_step() {
        let s = Schedule::constant(0.25, 7).unwrap();
        assert!((0..=7).all(|t| s.lr_at(t).unwrap() == 0.25));
    }

    #[test]
    fn out_of_range_step() {
        let s = Schedule::cosine(0.1, 0.0, 3).unwrap();
        assert!(matches!(s.lr_at(4), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn invalid_schedules() {
        assert!(Schedule::cosine(0.1, 0.2, 5).is_err());
        assert!(Schedule::cosine(0.1, -0.1, 5).is_err());
        assert!(Schedule::cosine(0.1, 0.0, 0).is_err());
    }
}
