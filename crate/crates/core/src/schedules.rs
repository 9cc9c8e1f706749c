//! Per-epoch learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{GavgError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Flat, linear ramp on `(0.5, 0.9]` of the budget, then `alpha0 * r`.
    #[default]
    Linear,
    /// Same shape measured against the averaging start, ending at `alpha_avg`.
    LinearIa,
    Step,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub alpha0: f64,
    #[serde(default = "default_r")]
    pub r: f64,
    /// Total epochs. Filled from the run's epoch budget when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_epochs: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_avg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_avg: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub milestones: Vec<f64>,
    #[serde(default = "default_factor")]
    pub factor: f64,
    /// Evaluate at fractional epochs inside an epoch instead of once per epoch.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub per_iteration: bool,
}

fn default_r() -> f64 {
    0.01
}

fn default_factor() -> f64 {
    10.0
}

impl ScheduleSpec {
    pub fn constant(alpha0: f64) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Constant,
            alpha0,
            r: default_r(),
            total_epochs: None,
            t_avg: None,
            alpha_avg: None,
            milestones: Vec::new(),
            factor: default_factor(),
            per_iteration: false,
        }
    }

    pub fn linear(alpha0: f64, total_epochs: f64) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Linear,
            total_epochs: Some(total_epochs),
            ..Self::constant(alpha0)
        }
    }

    pub fn linear_ia(alpha0: f64, total_epochs: f64, t_avg: f64) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::LinearIa,
            total_epochs: Some(total_epochs),
            t_avg: Some(t_avg),
            ..Self::constant(alpha0)
        }
    }

    pub fn step(alpha0: f64, total_epochs: f64, milestones: Vec<f64>, factor: f64) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Step,
            total_epochs: Some(total_epochs),
            milestones,
            factor,
            ..Self::constant(alpha0)
        }
    }

    pub fn alpha_avg(&self) -> f64 {
        self.alpha_avg.unwrap_or(0.5 * self.alpha0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return Err(GavgError::config("schedule.alpha0 must be > 0"));
        }
        if self.kind == ScheduleKind::Linear && !(self.r > 0.0 && self.r <= 1.0) {
            return Err(GavgError::config("schedule.r must lie in (0,1]"));
        }
        if self.kind == ScheduleKind::LinearIa {
            if !self.t_avg.is_some_and(|t| t > 0.0) {
                return Err(GavgError::config("linear_ia needs schedule.t_avg > 0"));
            }
            if !(self.alpha_avg() > 0.0) {
                return Err(GavgError::config("schedule.alpha_avg must be > 0"));
            }
        }
        if self.kind == ScheduleKind::Step && !(self.factor > 0.0) {
            return Err(GavgError::config("schedule.factor must be > 0"));
        }
        if self.total_epochs.is_some_and(|t| !(t >= 0.0)) {
            return Err(GavgError::config("schedule.total_epochs must be >= 0"));
        }
        Ok(())
    }

    /// Learning rate at epoch `t`, `0 <= t <= T`.
    pub fn lr_at(&self, t: f64) -> Result<f64> {
        let total = self
            .total_epochs
            .ok_or_else(|| GavgError::config("schedule has no total_epochs"))?;
        if !(0.0..=total).contains(&t) {
            return Err(GavgError::domain(format!("epoch {t} outside [0, {total}]")));
        }
        let a0 = self.alpha0;
        let lr = match self.kind {
            ScheduleKind::Constant => a0,
            ScheduleKind::Linear => {
                let frac = if total > 0.0 { t / total } else { 0.0 };
                ramp(a0, a0 * self.r, frac)
            }
            ScheduleKind::LinearIa => {
                let t_avg = self
                    .t_avg
                    .ok_or_else(|| GavgError::config("linear_ia needs t_avg"))?;
                ramp(a0, self.alpha_avg(), t / t_avg)
            }
            ScheduleKind::Step => {
                let passed = self.milestones.iter().filter(|m| **m <= t).count();
                a0 / self.factor.powi(passed as i32)
            }
        };
        Ok(lr)
    }
}

/// `a0` up to 0.5, linear to `a_end` at 0.9, `a_end` after.
fn ramp(a0: f64, a_end: f64, frac: f64) -> f64 {
    if frac <= 0.5 {
        a0
    } else if frac <= 0.9 {
        a0 * (1.0 - (1.0 - a_end / a0) * (frac - 0.5) / 0.4)
    } else {
        a_end
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_examples() {
        let s = ScheduleSpec::linear(0.1, 100.0);
        assert_eq!(s.lr_at(25.0).unwrap(), 0.1);
        assert!((s.lr_at(70.0).unwrap() - 0.0505).abs() < 1e-15);
        assert_eq!(s.lr_at(95.0).unwrap(), 0.1 * 0.01);
        assert!(s.lr_at(100.0 + 1e-9).is_err());
        assert!(s.lr_at(-1.0).is_err());
    }

    #[test]
    fn breakpoints_are_continuous() {
        let s = ScheduleSpec::linear(0.1, 100.0);
        let d = 1e-9;
        for bp in [50.0, 90.0] {
            let l = s.lr_at(bp).unwrap();
            let r = s.lr_at(bp + d).unwrap();
            assert!((l - r).abs() < 1e-8);
        }
        let s = ScheduleSpec::linear_ia(0.1, 100.0, 60.0);
        for bp in [30.0, 54.0] {
            let l = s.lr_at(bp).unwrap();
            let r = s.lr_at(bp + d).unwrap();
            assert!((l - r).abs() < 1e-8);
        }
    }

    #[test]
    fn linear_ia_flattens_at_alpha_avg() {
        let s = ScheduleSpec::linear_ia(0.2, 100.0, 50.0);
        for t in [45.0, 46.0, 60.0, 100.0] {
            assert_eq!(s.lr_at(t).unwrap(), 0.1);
        }
        assert_eq!(s.lr_at(25.0).unwrap(), 0.2);
    }

    #[test]
    fn step_examples() {
        let s = ScheduleSpec::step(0.1, 90.0, vec![30.0, 60.0], 10.0);
        assert!((s.lr_at(45.0).unwrap() - 0.01).abs() < 1e-18);
        assert_eq!(s.lr_at(29.0).unwrap(), 0.1);
        assert!((s.lr_at(60.0).unwrap() - 0.001).abs() < 1e-18);
    }

    #[test]
    fn linear_is_nonincreasing_and_positive() {
        let s = ScheduleSpec::linear(0.05, 37.0);
        let mut prev = f64::INFINITY;
        for i in 0..=370 {
            let lr = s.lr_at(i as f64 / 10.0).unwrap();
            assert!(lr > 0.0 && lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn json_defaults() {
        let s: ScheduleSpec = serde_json::from_str(r#"{"kind":"linear","alpha0":0.1}"#).unwrap();
        assert_eq!(s.r, 0.01);
        assert_eq!(s.factor, 10.0);
        assert!(serde_json::from_str::<ScheduleSpec>(r#"{"kind":"cosine","alpha0":0.1}"#).is_err());
    }
}
