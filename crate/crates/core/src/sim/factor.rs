//! Continuous-time factor model with stochastic loadings, factor volatility
//! co-jumps and idiosyncratic jumps, observed with additive noise.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Clock, VAR_FLOOR};
use crate::error::{Error, Result};
use crate::functional::MatrixFunctional;
use crate::grid::LogPriceGrid;
use crate::linalg::Mat;

/// Loadings: first column CIR (positive), the others OU. Per-factor vectors
/// have length r; per-asset quantities are shared scalars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorModelParams {
    /// Label of the parameter set; the defaults are not taken from any table.
    pub version: String,
    pub d: usize,
    pub r: usize,
    /// Long-run loadings, d×r row-major.
    pub loading_mean: Vec<f64>,
    pub loading_kappa: f64,
    pub loading_xi: f64,
    pub factor_mu: Vec<f64>,
    pub pi_kappa: Vec<f64>,
    pub pi_theta: Vec<f64>,
    pub pi_eta: Vec<f64>,
    pub leverage: Vec<f64>,
    pub lambda_f: Vec<f64>,
    /// Laplace scale of factor jumps.
    pub zeta_f: Vec<f64>,
    /// Mean of the exponential variance co-jump.
    pub zeta_pi: Vec<f64>,
    pub lambda_z: f64,
    pub zeta_z: f64,
    pub chi_kappa: f64,
    pub chi_theta: f64,
    pub chi_eta: f64,
    pub noise_sd: f64,
    /// Equicorrelation of the noise across assets.
    pub noise_corr: f64,
}

impl FactorModelParams {
    pub fn default_v1(d: usize, r: usize) -> Self {
        let mut loading_mean = vec![0.0; d * r];
        let span = (d.max(2) - 1) as f64;
        for j in 0..d {
            for k in 0..r {
                let ang = 2.0 * PI * j as f64 * k.div_ceil(2) as f64 / d as f64;
                loading_mean[j * r + k] = match k {
                    0 => 0.8 + 0.4 * j as f64 / span,
                    k if k % 2 == 1 => 0.5 * ang.cos(),
                    _ => 0.5 * ang.sin(),
                };
            }
        }
        let pis = [0.16, 0.25, 0.08];
        FactorModelParams {
            version: "v1".into(),
            d,
            r,
            loading_mean,
            loading_kappa: 2.0,
            loading_xi: 0.1,
            factor_mu: vec![0.05; r],
            pi_kappa: vec![5.0; r],
            pi_theta: (0..r).map(|k| *pis.get(k).unwrap_or(&0.08)).collect(),
            pi_eta: (0..r).map(|k| if k < 2 { 0.3 } else { 0.2 }).collect(),
            leverage: vec![-0.5; r],
            lambda_f: vec![12.0; r],
            zeta_f: vec![0.005; r],
            zeta_pi: vec![0.02; r],
            lambda_z: 12.0,
            zeta_z: 0.005,
            chi_kappa: 5.0,
            chi_theta: 0.01,
            chi_eta: 0.05,
            noise_sd: 0.001,
            noise_corr: 0.0,
        }
    }

    /// Frozen loadings and factor variances, no jumps, constant χ².
    pub fn frozen(mut self) -> Self {
        self.loading_xi = 0.0;
        self.loading_kappa = 0.0;
        self.pi_eta = vec![0.0; self.r];
        self.pi_kappa = vec![0.0; self.r];
        self.lambda_f = vec![0.0; self.r];
        self.lambda_z = 0.0;
        self.chi_eta = 0.0;
        self.chi_kappa = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (d, r) = (self.d, self.r);
        if d == 0 {
            return Err(Error::Config("factor model needs d >= 1".into()));
        }
        if r > d {
            return Err(Error::Config(format!("factor count r = {r} exceeds panel size d = {d}")));
        }
        if self.loading_mean.len() != d * r {
            return Err(Error::Config(format!("loading_mean has {} entries, expected d*r = {}", self.loading_mean.len(), d * r)));
        }
        for (name, v) in [
            ("factor_mu", &self.factor_mu),
            ("pi_kappa", &self.pi_kappa),
            ("pi_theta", &self.pi_theta),
            ("pi_eta", &self.pi_eta),
            ("leverage", &self.leverage),
            ("lambda_f", &self.lambda_f),
            ("zeta_f", &self.zeta_f),
            ("zeta_pi", &self.zeta_pi),
        ] {
            if v.len() != r {
                return Err(Error::Config(format!("{name} has {} entries, expected r = {r}", v.len())));
            }
        }
        if self.leverage.iter().any(|x| x.abs() > 1.0) {
            return Err(Error::Config("leverage correlation outside [-1, 1]".into()));
        }
        if self.pi_theta.iter().any(|&x| x <= 0.0) || self.chi_theta <= 0.0 {
            return Err(Error::Config("variance levels must be positive".into()));
        }
        if r > 0 && self.loading_mean.iter().step_by(r).any(|&b| b <= 0.0) {
            return Err(Error::Config("first-factor loadings must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.noise_corr) || self.noise_sd < 0.0 {
            return Err(Error::Config("noise_sd must be >= 0 and noise_corr in [0, 1)".into()));
        }
        Ok(())
    }
}

/// State of the latent drivers at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorState {
    pub beta: Vec<f64>,
    pub pi: Vec<f64>,
    pub chi2: f64,
}

impl FactorState {
    /// c = β diag(Π) βᵀ + χ² I
    pub fn c(&self, d: usize) -> Mat {
        let r = self.pi.len();
        let mut c = Mat::from_diagonal_element(d, d, self.chi2);
        for a in 0..d {
            for b in a..d {
                let s: f64 = (0..r).map(|k| self.beta[a * r + k] * self.pi[k] * self.beta[b * r + k]).sum();
                c[(a, b)] += s;
                if a != b {
                    c[(b, a)] += s;
                }
            }
        }
        c
    }
}

#[derive(Debug, Clone)]
pub struct FactorPath {
    pub grid: LogPriceGrid,
    /// Latent state every `stride` steps, starting at step 0.
    pub latent: Vec<FactorState>,
    pub stride: usize,
    pub steps: usize,
    pub floor_hits: usize,
}

impl FactorPath {
    /// Left Riemann sum of g(c) over the stored states.
    pub fn truth(&self, g: &dyn MatrixFunctional) -> Result<Vec<f64>> {
        let d = self.grid.d();
        let dn = self.grid.delta_n();
        let mut acc = vec![0.0; g.r_out(d)];
        for (s, st) in self.latent.iter().enumerate() {
            let w = self.stride.min(self.steps - s * self.stride) as f64 * dn;
            for (a, v) in acc.iter_mut().zip(g.value(&st.c(d))?) {
                *a += w * v;
            }
        }
        Ok(acc)
    }
}

fn laplace<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    let e: f64 = rng.sample(Exp1);
    if rng.gen::<bool>() {
        scale * e
    } else {
        -scale * e
    }
}

/// Euler scheme at the observation step with full truncation of the
/// square-root processes. Latent states are kept every `stride` steps.
pub fn simulate_factor<R: Rng + ?Sized>(
    params: &FactorModelParams,
    clock: &Clock,
    stride: usize,
    rng: &mut R,
) -> Result<FactorPath> {
    params.validate()?;
    let dt = clock.delta_n()?;
    let n = clock.n_obs();
    if n < 2 {
        return Err(Error::Config("need at least two observations".into()));
    }
    let stride = stride.max(1);
    let (d, r) = (params.d, params.r);
    let sq = dt.sqrt();
    let mut st = FactorState { beta: params.loading_mean.clone(), pi: params.pi_theta.clone(), chi2: params.chi_theta };
    let mut x = vec![0.0; d];
    let mut y = Mat::zeros(n, d);
    let mut latent = Vec::with_capacity((n - 1) / stride + 1);
    let mut floor_hits = 0;
    let mut df = vec![0.0; r];
    let steps = n - 1;
    let mut floor = |v: &mut f64| {
        if *v < VAR_FLOOR {
            *v = VAR_FLOOR;
            floor_hits += 1;
        }
    };
    let noise_row = |rng: &mut R, row: &mut [f64]| {
        if params.noise_sd == 0.0 {
            return;
        }
        let common: f64 = rng.sample(StandardNormal);
        let (a, b) = ((1.0 - params.noise_corr).sqrt(), params.noise_corr.sqrt());
        for v in row.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = params.noise_sd * (a * z + b * common);
        }
    };
    let mut e = vec![0.0; d];
    noise_row(rng, &mut e);
    for j in 0..d {
        y[(0, j)] = x[j] + e[j];
    }
    for step in 0..steps {
        if step % stride == 0 {
            latent.push(st.clone());
        }
        // factors and their variances
        let mut pi_next = st.pi.clone();
        for k in 0..r {
            let zw: f64 = rng.sample(StandardNormal);
            let zp: f64 = rng.sample(StandardNormal);
            let u: f64 = rng.gen();
            let jf = laplace(rng, params.zeta_f[k]);
            let jp: f64 = params.zeta_pi[k] * rng.sample::<f64, _>(Exp1);
            let rho = params.leverage[k];
            let root = st.pi[k].max(0.0).sqrt();
            let dwt = (rho * zw + (1.0 - rho * rho).sqrt() * zp) * sq;
            df[k] = params.factor_mu[k] * dt + root * zw * sq;
            let p = &mut pi_next[k];
            *p += params.pi_kappa[k] * (params.pi_theta[k] - st.pi[k].max(0.0)) * dt + params.pi_eta[k] * root * dwt;
            if u < params.lambda_f[k] * dt {
                df[k] += jf;
                *p += jp;
            }
        }
        for p in pi_next.iter_mut() {
            floor(p);
        }
        for j in 0..d {
            let mut dx: f64 = (0..r).map(|k| st.beta[j * r + k] * df[k]).sum();
            let zb: f64 = rng.sample(StandardNormal);
            let u: f64 = rng.gen();
            let jz = laplace(rng, params.zeta_z);
            dx += st.chi2.max(0.0).sqrt() * zb * sq;
            if u < params.lambda_z * dt {
                dx += jz;
            }
            x[j] += dx;
        }
        for j in 0..d {
            for k in 0..r {
                let z: f64 = rng.sample(StandardNormal);
                let b = &mut st.beta[j * r + k];
                let mean = params.loading_mean[j * r + k];
                if k == 0 {
                    let bp = b.max(0.0);
                    *b += params.loading_kappa * (mean - bp) * dt + params.loading_xi * bp.sqrt() * z * sq;
                    floor(b);
                } else {
                    *b += params.loading_kappa * (mean - *b) * dt + params.loading_xi * z * sq;
                }
            }
        }
        let zc: f64 = rng.sample(StandardNormal);
        let cp = st.chi2.max(0.0);
        st.chi2 += params.chi_kappa * (params.chi_theta - cp) * dt + params.chi_eta * cp.sqrt() * zc * sq;
        floor(&mut st.chi2);
        st.pi = pi_next;
        noise_row(rng, &mut e);
        for j in 0..d {
            y[(step + 1, j)] = x[j] + e[j];
        }
    }
    if floor_hits > 0 {
        log::info!("positivity floor hit {floor_hits} times over {steps} steps");
    }
    let labels = (1..=d).map(|j| format!("A{j}")).collect();
    let grid = LogPriceGrid::new(y, dt, labels)?;
    Ok(FactorPath { grid, latent, stride, steps, floor_hits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functional::{ClusterSpec, EigenvalueFunctional};
    use crate::linalg::eig_sorted;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clock() -> Clock {
        Clock { obs_per_day: 2280, days: 1, days_per_unit: 252.0 }
    }

    #[test]
    fn rank_one_spectrum() {
        let mut p = FactorModelParams::default_v1(4, 1).frozen();
        p.loading_mean = vec![1.0; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let path = simulate_factor(&p, &clock(), 10, &mut rng).unwrap();
        let c = path.latent.last().unwrap().c(4);
        let (lam, _) = eig_sorted(&c).unwrap();
        assert!((lam[0] - (4.0 * 0.16 + 0.01)).abs() < 1e-12);
        for v in lam.iter().skip(1) {
            assert!((v - 0.01).abs() < 1e-12);
        }
    }

    #[test]
    fn idiosyncratic_only_is_diagonal() {
        let p = FactorModelParams::default_v1(2, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let path = simulate_factor(&p, &clock(), 1, &mut rng).unwrap();
        for s in &path.latent {
            let c = s.c(2);
            assert_eq!(c[(0, 1)], 0.0);
        }
    }

    #[test]
    fn default_spectrum_separation_and_determinism() {
        let p = FactorModelParams::default_v1(10, 3);
        let run = |seed| simulate_factor(&p, &clock(), 10, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let a = run(4);
        assert_eq!(a.grid.values(), run(4).grid.values());
        let g = EigenvalueFunctional::new(ClusterSpec::from_sizes(&[1, 1, 1, 7]).unwrap());
        let t = a.truth(&g).unwrap();
        let ratio = t[0] / t[1];
        assert!(ratio > 3.0 && ratio < 8.0, "{ratio}");
        assert!((a.floor_hits as f64) < 1e-3 * a.steps as f64);
    }

    #[test]
    fn r_above_d_rejected() {
        let p = FactorModelParams::default_v1(2, 3);
        assert!(matches!(simulate_factor(&p, &clock(), 1, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Config(_))));
    }
}
