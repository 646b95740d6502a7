//! Per-batch learning-rate schedules.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Linear,
    /// Cosine annealing with warm restarts.
    Cawr,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("lr_min ({lr_min}) must lie in [0, lr_max = {lr_max}]")]
    Bounds { lr_min: f64, lr_max: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleState {
    kind: ScheduleKind,
    lr_max: f64,
    lr_min: f64,
    /// Decay length of the linear schedule or cycle length of CAWR.
    period: u64,
    step: u64,
}

impl ScheduleState {
    pub fn constant(lr: f64) -> Result<Self, ScheduleError> {
        Self::new(ScheduleKind::Constant, lr, lr, 1)
    }

    pub fn linear(lr_max: f64, lr_min: f64, total_steps: u64) -> Result<Self, ScheduleError> {
        Self::new(ScheduleKind::Linear, lr_max, lr_min, total_steps)
    }

    pub fn cawr(lr_max: f64, lr_min: f64, steps_per_cycle: u64) -> Result<Self, ScheduleError> {
        Self::new(ScheduleKind::Cawr, lr_max, lr_min, steps_per_cycle)
    }

    /// `period` is the total step count for `Linear`, the cycle length for
    /// `Cawr`, and ignored for `Constant`.
    pub fn new(kind: ScheduleKind, lr_max: f64, lr_min: f64, period: u64) -> Result<Self, ScheduleError> {
        if !(lr_max > 0.0 && lr_max.is_finite()) {
            return Err(ScheduleError::NonPositive("lr_max"));
        }
        if !(lr_min >= 0.0 && lr_min <= lr_max) {
            return Err(ScheduleError::Bounds { lr_min, lr_max });
        }
        if period == 0 && kind != ScheduleKind::Constant {
            return Err(ScheduleError::NonPositive(match kind {
                ScheduleKind::Linear => "total_steps",
                _ => "steps_per_cycle",
            }));
        }
        Ok(Self {
            kind,
            lr_max,
            lr_min,
            period: period.max(1),
            step: 0,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let span = self.lr_max - self.lr_min;
        match self.kind {
            ScheduleKind::Constant => self.lr_max,
            ScheduleKind::Linear if step >= self.period => self.lr_min,
            ScheduleKind::Linear => {
                let frac = step as f64 / self.period as f64;
                (self.lr_max - span * frac).max(self.lr_min)
            }
            ScheduleKind::Cawr => match step % self.period {
                0 => self.lr_max,
                k => {
                    let phase = k as f64 / self.period as f64;
                    let lr = self.lr_min + 0.5 * span * (1.0 + (std::f64::consts::PI * phase).cos());
                    lr.clamp(self.lr_min, self.lr_max)
                }
            },
        }
    }

    /// Rate for the upcoming batch.
    pub fn current(&self) -> f64 {
        self.lr_at(self.step)
    }

    /// Returns the current rate and moves to the next batch.
    pub fn advance(&mut self) -> f64 {
        let lr = self.current();
        self.step += 1;
        lr
    }

    pub fn restart(&mut self) {
        self.step = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cawr_endpoints() {
        let s = ScheduleState::cawr(1e-3, 1e-5, 100).unwrap();
        assert_eq!(s.lr_at(0), 1e-3);
        assert!((s.lr_at(50) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert_eq!(s.lr_at(100), 1e-3);
    }

    #[test]
    fn linear_endpoint_and_clamp() {
        let s = ScheduleState::linear(1e-3, 1e-4, 40).unwrap();
        assert_eq!(s.lr_at(0), 1e-3);
        assert!((s.lr_at(40) - 1e-4).abs() < 1e-18);
        assert!((s.lr_at(400) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn constant_ignores_step() {
        let s = ScheduleState::constant(0.5).unwrap();
        assert_eq!(s.lr_at(0), 0.5);
        assert_eq!(s.lr_at(1_000_000), 0.5);
    }

    #[test]
    fn restart_returns_to_lr_max() {
        for mut s in [
            ScheduleState::cawr(1e-3, 0.0, 7).unwrap(),
            ScheduleState::linear(1e-3, 0.0, 7).unwrap(),
        ] {
            for _ in 0..5 {
                s.advance();
            }
            assert!(s.current() < 1e-3);
            s.restart();
            assert_eq!(s.current(), 1e-3);
            s.restart();
            assert_eq!(s.step(), 0);
        }
    }

    #[test]
    fn advance_steps_counter() {
        let mut s = ScheduleState::cawr(1.0, 0.0, 4).unwrap();
        let trace: Vec<f64> = (0..5).map(|_| s.advance()).collect();
        assert_eq!(trace[0], 1.0);
        assert!((trace[2] - 0.5).abs() < 1e-15);
        assert_eq!(trace[4], 1.0);
        assert_eq!(s.step(), 5);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert_eq!(
            ScheduleState::cawr(1e-3, 0.0, 0),
            Err(ScheduleError::NonPositive("steps_per_cycle"))
        );
        assert_eq!(
            ScheduleState::linear(1e-3, 0.0, 0),
            Err(ScheduleError::NonPositive("total_steps"))
        );
        assert!(ScheduleState::constant(0.0).is_err());
        assert!(ScheduleState::cawr(1e-3, 2e-3, 5).is_err());
        assert!(ScheduleState::cawr(1e-3, -1.0, 5).is_err());
    }

    proptest! {
        #[test]
        fn rate_stays_in_bounds(lr_max in 1e-6f64..1.0, frac in 0.0f64..1.0, period in 1u64..500, step in 0u64..5000) {
            let lr_min = lr_max * frac;
            for kind in [ScheduleKind::Constant, ScheduleKind::Linear, ScheduleKind::Cawr] {
                let s = ScheduleState::new(kind, lr_max, lr_min, period).unwrap();
                let lr = s.lr_at(step);
                prop_assert!(lr >= lr_min * (1.0 - 1e-12) && lr <= lr_max * (1.0 + 1e-12));
            }
        }

        #[test]
        fn cawr_periodic_and_decreasing(lr_max in 1e-6f64..1.0, period in 1u64..200, step in 0u64..2000) {
            let s = ScheduleState::cawr(lr_max, 0.0, period).unwrap();
            prop_assert_eq!(s.lr_at(step), s.lr_at(step + period));
            if (step + 1) % period != 0 {
                prop_assert!(s.lr_at(step + 1) <= s.lr_at(step));
            }
        }

        #[test]
        fn linear_affine_until_clamp(total in 2u64..500, a in 0u64..500, b in 0u64..500) {
            let s = ScheduleState::linear(1.0, 0.0, total).unwrap();
            let (a, b) = (a.min(total), b.min(total));
            let slope = -1.0 / total as f64;
            prop_assert!((s.lr_at(b) - s.lr_at(a) - slope * (b as f64 - a as f64)).abs() < 1e-12);
        }
    }
}
