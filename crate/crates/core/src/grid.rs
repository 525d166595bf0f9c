//! Mixed-resolution time grid.
//!
//! Paths are simulated with the fine step `dt_fine`; every integral in the
//! weight recursion is discretized on the coarse step `dt_coarse`. The
//! coarse step must be an integer multiple of the fine step and the horizon
//! an integer multiple of the coarse step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack when checking that step ratios are integers.
const RATIO_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    dt_fine: f64,
    dt_coarse: f64,
    fine_per_coarse: usize,
    coarse_steps: usize,
}

fn integer_ratio(num: f64, den: f64) -> Option<usize> {
    let r = num / den;
    let n = r.round();
    if n >= 1.0 && (r - n).abs() <= RATIO_TOL * n.max(1.0) && n < usize::MAX as f64 {
        Some(n as usize)
    } else {
        None
    }
}

impl TimeGrid {
    pub fn new(horizon: f64, dt_fine: f64, dt_coarse: f64) -> Result<Self> {
        for (name, v) in [("T", horizon), ("dt_fine", dt_fine), ("dt_coarse", dt_coarse)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidGrid(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if dt_fine > dt_coarse {
            return Err(Error::InvalidGrid(format!(
                "dt_fine ({dt_fine}) must not exceed dt_coarse ({dt_coarse})"
            )));
        }
        let fine_per_coarse = integer_ratio(dt_coarse, dt_fine).ok_or_else(|| {
            Error::InvalidGrid(format!(
                "dt_coarse ({dt_coarse}) is not an integer multiple of dt_fine ({dt_fine})"
            ))
        })?;
        let coarse_steps = integer_ratio(horizon, dt_coarse).ok_or_else(|| {
            Error::InvalidGrid(format!(
                "T ({horizon}) is not an integer multiple of dt_coarse ({dt_coarse})"
            ))
        })?;
        Ok(Self {
            horizon,
            dt_fine,
            dt_coarse,
            fine_per_coarse,
            coarse_steps,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt_fine(&self) -> f64 {
        self.dt_fine
    }

    pub fn dt_coarse(&self) -> f64 {
        self.dt_coarse
    }

    /// Number of fine steps per coarse step.
    pub fn fine_per_coarse(&self) -> usize {
        self.fine_per_coarse
    }

    /// `T / dt_coarse`; coarse indices run over `0..=coarse_steps()`.
    pub fn coarse_steps(&self) -> usize {
        self.coarse_steps
    }

    /// `T / dt_fine`; fine indices run over `0..=fine_steps()`.
    pub fn fine_steps(&self) -> usize {
        self.coarse_steps * self.fine_per_coarse
    }

    pub fn coarse_time(&self, j: usize) -> f64 {
        j as f64 * self.dt_coarse
    }

    pub fn fine_time(&self, j: usize) -> f64 {
        j as f64 * self.dt_fine
    }

    /// Nearest coarse index to time `t`, rejecting times outside `[0, T]`.
    pub fn coarse_index_at(&self, t: f64) -> Result<usize> {
        if !(t.is_finite() && t >= 0.0 && t <= self.horizon * (1.0 + RATIO_TOL)) {
            return Err(Error::invalid(format!("time {t} outside [0, {}]", self.horizon)));
        }
        Ok(((t / self.dt_coarse).round() as usize).min(self.coarse_steps))
    }

    /// Same grid up to floating-point noise in the stored steps.
    pub fn same_as(&self, other: &TimeGrid) -> bool {
        self.coarse_steps == other.coarse_steps
            && self.fine_per_coarse == other.fine_per_coarse
            && (self.dt_coarse - other.dt_coarse).abs() <= RATIO_TOL * self.dt_coarse
    }

    pub(crate) fn ensure_same(&self, other: &TimeGrid, what: &str) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: T={} dt_fine={} dt_coarse={} vs T={} dt_fine={} dt_coarse={}",
                self.horizon, self.dt_fine, self.dt_coarse, other.horizon, other.dt_fine, other.dt_coarse
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_counts() {
        let g = TimeGrid::new(1.0, 1e-3, 1e-2).unwrap();
        assert_eq!(g.fine_per_coarse(), 10);
        assert_eq!(g.coarse_steps(), 100);
        assert_eq!(g.fine_steps(), 1000);
        assert_eq!(g.coarse_index_at(1.0).unwrap(), 100);
        assert_eq!(g.coarse_index_at(0.5).unwrap(), 50);
    }

    #[test]
    fn rejects_non_integer_ratios() {
        let err = TimeGrid::new(1.0, 3e-3, 1e-2).unwrap_err();
        assert!(err.to_string().contains("dt_coarse"));
        assert!(TimeGrid::new(1.0, 1e-3, 0.3).is_err());
        assert!(TimeGrid::new(1.0, 1e-2, 1e-3).is_err());
        assert!(TimeGrid::new(0.0, 1e-3, 1e-2).is_err());
    }

    #[test]
    fn degenerate_single_step() {
        let g = TimeGrid::new(0.5, 0.5, 0.5).unwrap();
        assert_eq!(g.coarse_steps(), 1);
        assert_eq!(g.fine_per_coarse(), 1);
    }
}
