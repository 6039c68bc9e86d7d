//! Simulators for the scalar and factor models, bipower pre-estimation and
//! the Monte-Carlo harness.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod bipower;
pub mod factor;
pub mod mc;
pub mod scalar;

pub use factor::{simulate_factor, FactorModelParams, FactorPath};
pub use scalar::{simulate_scalar, ScalarModelParams, ScalarPath};

/// Positivity floor for square-root variance processes.
pub const VAR_FLOOR: f64 = 1e-10;

/// Sampling clock. Model parameters are annualised, so Δₙ is one observation
/// step in units of `days_per_unit` trading days.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Clock {
    pub obs_per_day: usize,
    pub days: usize,
    #[serde(default = "default_days_per_unit")]
    pub days_per_unit: f64,
}

fn default_days_per_unit() -> f64 {
    252.0
}

impl Clock {
    pub fn new(obs_per_day: usize, days: usize) -> Self {
        Clock { obs_per_day, days, days_per_unit: 252.0 }
    }

    pub fn delta_n(&self) -> Result<f64> {
        let d = 1.0 / (self.days_per_unit * self.obs_per_day as f64);
        if !(d > 0.0 && d < 1.0) || self.obs_per_day == 0 {
            return Err(Error::Config(format!("delta_n = {d} must lie in (0, 1)")));
        }
        Ok(d)
    }

    pub fn n_obs(&self) -> usize {
        self.obs_per_day * self.days
    }
}
