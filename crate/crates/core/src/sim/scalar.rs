//! Scalar jump-diffusion with CIR-type stochastic volatility, observed with
//! additive i.i.d. noise.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Clock, VAR_FLOOR};
use crate::error::{Error, Result};
use crate::functional::MatrixFunctional;
use crate::grid::LogPriceGrid;
use crate::linalg::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalarModelParams {
    pub mu: f64,
    pub kappa: f64,
    pub theta: f64,
    pub xi: f64,
    /// corr(W, B)
    pub rho: f64,
    pub noise_sd: f64,
    pub lambda_x: f64,
    pub jump_x_mean: f64,
    pub jump_x_sd: f64,
    pub lambda_c: f64,
    pub jump_c_log_mean: f64,
    pub jump_c_log_var: f64,
    /// Starting variance; the long-run mean when absent.
    pub c0: Option<f64>,
    pub x0: f64,
}

impl Default for ScalarModelParams {
    fn default() -> Self {
        ScalarModelParams {
            mu: 0.03,
            kappa: 6.0,
            theta: 0.16,
            xi: 0.5,
            rho: -0.6,
            noise_sd: 0.005,
            lambda_x: 36.0,
            jump_x_mean: -0.01,
            jump_x_sd: 0.02,
            lambda_c: 12.0,
            jump_c_log_mean: -5.0,
            jump_c_log_var: 0.8,
            c0: None,
            x0: 0.0,
        }
    }
}

impl ScalarModelParams {
    /// Continuous Brownian motion with drift at constant variance, no noise.
    pub fn constant(c: f64) -> Self {
        ScalarModelParams {
            mu: 0.0,
            kappa: 0.0,
            theta: c,
            xi: 0.0,
            rho: 0.0,
            noise_sd: 0.0,
            lambda_x: 0.0,
            lambda_c: 0.0,
            c0: Some(c),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.mu, self.kappa, self.theta, self.xi, self.rho, self.noise_sd, self.lambda_x, self.lambda_c];
        if finite.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("non-finite scalar model parameter".into()));
        }
        if self.rho.abs() > 1.0 {
            return Err(Error::Config(format!("correlation {} outside [-1, 1]", self.rho)));
        }
        if self.noise_sd < 0.0 || self.xi < 0.0 || self.jump_x_sd < 0.0 || self.jump_c_log_var < 0.0 {
            return Err(Error::Config("scale parameters must be nonnegative".into()));
        }
        if self.lambda_x < 0.0 || self.lambda_c < 0.0 {
            return Err(Error::Config("jump intensities must be nonnegative".into()));
        }
        if self.theta <= 0.0 || self.c0.is_some_and(|c| c <= 0.0) {
            return Err(Error::Config("variance levels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ScalarPath {
    pub grid: LogPriceGrid,
    /// Latent variance on the fine grid, `substeps` points per observation step.
    pub c_fine: Vec<f64>,
    /// Efficient log-price at observation times.
    pub x: Vec<f64>,
    pub noise: Vec<f64>,
    pub substeps: usize,
    pub floor_hits: usize,
    pub steps: usize,
    pub price_jumps: usize,
    pub vol_jumps: usize,
}

impl ScalarPath {
    /// Left Riemann sum of g(c) over the observation horizon, sampling the
    /// fine path every `stride` fine steps.
    pub fn truth_strided(&self, g: &dyn MatrixFunctional, stride: usize) -> Result<Vec<f64>> {
        let stride = stride.max(1);
        let fine_steps = (self.grid.n() - 1) * self.substeps;
        let dt = self.grid.delta_n() / self.substeps as f64;
        let mut acc = vec![0.0; g.r_out(1)];
        let mut j = 0;
        while j < fine_steps {
            let w = stride.min(fine_steps - j) as f64 * dt;
            let v = g.value(&Mat::from_element(1, 1, self.c_fine[j]))?;
            for (a, b) in acc.iter_mut().zip(v) {
                *a += w * b;
            }
            j += stride;
        }
        Ok(acc)
    }

    pub fn truth(&self, g: &dyn MatrixFunctional) -> Result<Vec<f64>> {
        self.truth_strided(g, 1)
    }

    /// c at observation times.
    pub fn c_obs(&self) -> Vec<f64> {
        self.c_fine.iter().step_by(self.substeps).cloned().collect()
    }
}

/// Euler scheme with full truncation; at most one jump per process per step.
pub fn simulate_scalar<R: Rng + ?Sized>(
    params: &ScalarModelParams,
    clock: &Clock,
    substeps: usize,
    rng: &mut R,
) -> Result<ScalarPath> {
    params.validate()?;
    let delta_n = clock.delta_n()?;
    let n = clock.n_obs();
    if n < 2 {
        return Err(Error::Config("need at least two observations".into()));
    }
    let s = substeps.max(1);
    let dt = delta_n / s as f64;
    let sq = dt.sqrt();
    let rho_c = (1.0 - params.rho * params.rho).max(0.0).sqrt();
    let jx = Normal::new(params.jump_x_mean, params.jump_x_sd).map_err(|e| Error::Config(e.to_string()))?;
    let jc = Normal::new(params.jump_c_log_mean, params.jump_c_log_var.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let (px, pc) = (params.lambda_x * dt, params.lambda_c * dt);
    if px > 1.0 || pc > 1.0 {
        return Err(Error::Config("jump probability per step exceeds one; refine the grid".into()));
    }

    let fine = (n - 1) * s;
    let mut c_fine = Vec::with_capacity(fine + 1);
    let mut x = Vec::with_capacity(n);
    let mut c = params.c0.unwrap_or(params.theta);
    let mut xt = params.x0;
    let mut floor_hits = 0;
    let (mut price_jumps, mut vol_jumps) = (0, 0);
    c_fine.push(c);
    x.push(xt);
    for step in 0..fine {
        let zb: f64 = rng.sample(StandardNormal);
        let zp: f64 = rng.sample(StandardNormal);
        let ux: f64 = rng.gen();
        let jump_x = jx.sample(rng);
        let uc: f64 = rng.gen();
        let jump_c = jc.sample(rng).exp();
        let root = c.max(0.0).sqrt();
        let db = zb * sq;
        let dw = (params.rho * zb + rho_c * zp) * sq;
        xt += params.mu * dt + root * dw;
        if ux < px {
            xt += jump_x;
            price_jumps += 1;
        }
        let mut cn = c + params.kappa * (params.theta - c.max(0.0)) * dt + params.xi * root * db;
        if uc < pc {
            cn += root * jump_c;
            vol_jumps += 1;
        }
        if cn < VAR_FLOOR {
            cn = VAR_FLOOR;
            floor_hits += 1;
        }
        c = cn;
        c_fine.push(c);
        if (step + 1) % s == 0 {
            x.push(xt);
        }
    }
    let mut noise = Vec::with_capacity(n);
    let mut y = Mat::zeros(n, 1);
    for i in 0..n {
        let e = if params.noise_sd > 0.0 { params.noise_sd * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
        noise.push(e);
        y[(i, 0)] = x[i] + e;
    }
    if floor_hits > 0 {
        log::info!("variance floor hit on {floor_hits} of {fine} steps");
    }
    let grid = LogPriceGrid::new(y, delta_n, vec!["X".into()])?;
    Ok(ScalarPath { grid, c_fine, x, noise, substeps: s, floor_hits, steps: fine, price_jumps, vol_jumps })
}
