//! Bias tensors, the integrated-functional estimators Ŝ(g)/S̃(g), plug-in
//! asymptotic variances and confidence intervals.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::functional::MatrixFunctional;
use crate::grid::LogPriceGrid;
use crate::kernel::{constants, DiscreteKernel, KernelConstants, KernelProfile};
use crate::linalg::{eigen_floor, eig_sorted, max_abs, min_eigenvalue, symmetrize, vec_rm, Mat, Tensor4};
use crate::preavg::{threshold, truncate, ConvPath, PreAveragedSeries, TruncationMask, TruncationSpec};
use crate::sim::bipower::preaveraged_bipower;
use crate::spot::{spot_series, EstimatorKind, SpotOptions, SpotVolSeries, TuningPlan, ValidatedPlan};

#[derive(Debug, Clone, PartialEq)]
pub struct BiasTensors {
    pub sigma: Tensor4,
    pub theta: Tensor4,
    pub upsilon: Tensor4,
    pub xi: Tensor4,
}

fn pair_product(a: &Mat, b: &Mat) -> Tensor4 {
    // a^{jl} b^{km} + a^{jm} b^{kl}
    let d = a.nrows();
    let mut t = Tensor4::zeros(d);
    for j in 0..d {
        for k in 0..d {
            for l in 0..d {
                for m in 0..d {
                    t.set(j, k, l, m, a[(j, l)] * b[(k, m)] + a[(j, m)] * b[(k, l)]);
                }
            }
        }
    }
    t
}

/// Σ(x), Θ(x, z), Υ(z) and Ξ = Σ + Θ + Υ.
pub fn tensors(x: &Mat, z: &Mat, theta: f64, kc: &KernelConstants) -> Result<BiasTensors> {
    if x.shape() != z.shape() || x.nrows() != x.ncols() {
        return Err(Error::Shape(format!("tensor inputs {:?} and {:?} must be equal square shapes", x.shape(), z.shape())));
    }
    let p2 = kc.phi0_at_0 * kc.phi0_at_0;
    let sigma = sigma_tensor(x, theta, kc);
    let cross = pair_product(x, z).add(&pair_product(z, x));
    let theta_t = cross.scale(2.0 * kc.phi01 / (theta * p2));
    let upsilon = pair_product(z, z).scale(2.0 * kc.phi11 / (theta.powi(3) * p2));
    let xi = sigma.add(&theta_t).add(&upsilon);
    Ok(BiasTensors { sigma, theta: theta_t, upsilon, xi })
}

pub fn sigma_tensor(x: &Mat, theta: f64, kc: &KernelConstants) -> Tensor4 {
    pair_product(x, x).scale(theta * kc.sigma_scale())
}

fn hessian_contract(g: &dyn MatrixFunctional, c: &Mat, t: &Tensor4) -> Result<Vec<f64>> {
    Ok(g.hessian(c)?.iter().map(|h| h.full_contract(t)).collect())
}

/// B̂(g) = (2kₙΔₙ^{1/2})^{-1} Σ ∂²g(ĉ)·Ξ(ĉ, γ̂)
pub fn bias_hat(
    g: &dyn MatrixFunctional,
    c_hat: &Mat,
    gamma_hat: &Mat,
    plan: &ValidatedPlan,
    kc: &KernelConstants,
) -> Result<Vec<f64>> {
    let t = tensors(c_hat, gamma_hat, effective_theta(plan), kc)?;
    let s = 2.0 * plan.k_n as f64 * plan.delta_n.sqrt();
    Ok(hessian_contract(g, c_hat, &t.xi)?.into_iter().map(|v| v / s).collect())
}

/// B̃(g) = (2kₙΔₙ^{1/2+δ})^{-1} Σ ∂²g(c̃)·Σ(c̃)
pub fn bias_tilde(g: &dyn MatrixFunctional, c_tilde: &Mat, plan: &ValidatedPlan, kc: &KernelConstants) -> Result<Vec<f64>> {
    let t = sigma_tensor(c_tilde, effective_theta(plan), kc);
    let s = 2.0 * plan.k_n as f64 * plan.delta_n.powf(0.5 + plan.plan.delta);
    Ok(hessian_contract(g, c_tilde, &t)?.into_iter().map(|v| v / s).collect())
}

/// θ implied by the integer window: lₙΔₙ^{1/2} (or lₙΔₙ^{1/2+δ} for psd plans).
pub fn effective_theta(plan: &ValidatedPlan) -> f64 {
    let e = if plan.plan.mode.is_psd() { 0.5 + plan.plan.delta } else { 0.5 };
    plan.l_n as f64 * plan.delta_n.powf(e)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub plan: TuningPlan,
    #[serde(skip, default = "KernelProfile::minmax")]
    pub kernel: KernelProfile,
    pub truncation: TruncationSpec,
    /// Per-asset variance levels for the threshold; estimated when absent.
    #[serde(default)]
    pub sigma_bar2: Option<Vec<f64>>,
    #[serde(default = "default_ci_level")]
    pub ci_level: f64,
    #[serde(default = "default_true")]
    pub bias_correction: bool,
    #[serde(default)]
    pub spot: SpotOptions,
    /// Eigenvalue floor for singular functionals, relative to trace.
    #[serde(default = "default_floor_rel")]
    pub floor_rel: f64,
    #[serde(default = "default_conv")]
    pub conv: ConvPath,
    #[serde(default = "default_quad_mesh")]
    pub quad_mesh: usize,
    #[serde(skip)]
    pub kernel_constants: Option<KernelConstants>,
}

fn default_ci_level() -> f64 {
    0.95
}
fn default_true() -> bool {
    true
}
fn default_floor_rel() -> f64 {
    1e-8
}
fn default_conv() -> ConvPath {
    ConvPath::Auto
}
fn default_quad_mesh() -> usize {
    1000
}

impl EstimatorConfig {
    pub fn new(plan: TuningPlan, truncation: TruncationSpec) -> Self {
        EstimatorConfig {
            plan,
            kernel: KernelProfile::minmax(),
            truncation,
            sigma_bar2: None,
            ci_level: default_ci_level(),
            bias_correction: true,
            spot: SpotOptions::default(),
            floor_rel: default_floor_rel(),
            conv: default_conv(),
            quad_mesh: default_quad_mesh(),
            kernel_constants: None,
        }
    }

    pub fn constants(&self) -> Result<KernelConstants> {
        match self.kernel_constants {
            Some(kc) => Ok(kc),
            None => constants(&self.kernel, self.quad_mesh),
        }
    }

    /// Compute kernel constants once so repeated runs reuse them.
    pub fn with_cached_constants(mut self) -> Result<Self> {
        self.kernel_constants = Some(constants(&self.kernel, self.quad_mesh)?);
        Ok(self)
    }
}

/// Everything upstream of the functional: plan, constants, spot series.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub plan: ValidatedPlan,
    pub kc: KernelConstants,
    pub truncation: TruncationSpec,
    pub sigma_bar2: Vec<f64>,
    pub spot: SpotVolSeries,
    pub n: usize,
    pub d: usize,
}

pub fn prepare(grid: &LogPriceGrid, cfg: &EstimatorConfig) -> Result<Prepared> {
    let plan = cfg.plan.validate(grid.delta_n())?;
    let kc = cfg.constants()?;
    let incr = grid.increments();
    let dk = DiscreteKernel::new(&cfg.kernel, plan.l_n)?;
    let kind = plan.kind();
    let pre = PreAveragedSeries::build(&incr, &dk, kind == EstimatorKind::Hat, cfg.conv)?;
    let sigma_bar2 = match &cfg.sigma_bar2 {
        Some(s) => {
            if s.len() != 1 && s.len() != grid.d() {
                return Err(Error::Config(format!("{} variance levels for {} assets", s.len(), grid.d())));
            }
            if s.len() == 1 {
                vec![s[0]; grid.d()]
            } else {
                s.clone()
            }
        }
        None => preaveraged_bipower(&incr, &pre, &dk)?,
    };
    let truncation = threshold(grid.delta_n(), &cfg.truncation, &sigma_bar2)?;
    let mask: TruncationMask = truncate(&pre.ybar, &truncation)?;
    let spot = spot_series(&incr, &pre, &mask, &plan, kind, cfg.spot)?;
    Ok(Prepared { plan, kc, truncation, sigma_bar2, spot, n: grid.n(), d: grid.d() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalEstimate {
    pub functional: String,
    pub labels: Vec<String>,
    pub mode: EstimatorKind,
    pub value: Vec<f64>,
    /// Riemann sum without the bias correction.
    pub uncorrected: Vec<f64>,
    pub avar: Vec<Vec<f64>>,
    pub rate_scale: f64,
    pub level: f64,
    pub ci: Vec<[f64; 2]>,
    pub plan: ValidatedPlan,
    pub n: usize,
    pub delta_n: f64,
    pub n_windows: usize,
    pub a_t: f64,
    pub floor_hits: usize,
    pub kept_fraction: f64,
    pub warnings: Vec<String>,
}

impl FunctionalEstimate {
    pub fn avar_matrix(&self) -> Mat {
        let r = self.avar.len();
        Mat::from_fn(r, r, |i, j| self.avar[i][j])
    }

    /// sqrt(rate_scale·avar_jj)
    pub fn std_errors(&self) -> Result<Vec<f64>> {
        (0..self.value.len())
            .map(|j| {
                let v = self.avar[j][j];
                if v < 0.0 {
                    return Err(Error::Numeric(format!(
                        "negative asymptotic variance {v:e} for component {}; the hat estimator is not PSD in finite samples, try --psd",
                        j + 1
                    )));
                }
                Ok((self.rate_scale * v).sqrt())
            })
            .collect()
    }
}

struct WindowTerm {
    value: Vec<f64>,
    bias: Vec<f64>,
    avar: Mat,
    floored: bool,
}

fn window_term(
    g: &dyn MatrixFunctional,
    c: &Mat,
    gamma: &Mat,
    kind: EstimatorKind,
    plan: &ValidatedPlan,
    kc: &KernelConstants,
    floor_rel: f64,
    with_bias: bool,
) -> Result<WindowTerm> {
    let mut c = c.clone();
    let mut floored = false;
    if g.domain_guard() {
        let (lam, _) = eig_sorted(&c)?;
        let scale = c.trace().max(lam.iter().fold(0.0f64, |m, x| m.max(x.abs())));
        let eps = floor_rel * scale.max(f64::MIN_POSITIVE);
        let (cf, hit) = eigen_floor(&c, eps)?;
        c = cf;
        floored = hit;
    }
    let theta = effective_theta(plan);
    let t = match kind {
        EstimatorKind::Hat => tensors(&c, gamma, theta, kc)?.xi,
        EstimatorKind::Tilde => sigma_tensor(&c, theta, kc),
    };
    let value = g.value(&c)?;
    let bias = if with_bias {
        let s = 2.0 * plan.bias_scale();
        hessian_contract(g, &c, &t)?.into_iter().map(|v| v / s).collect()
    } else {
        vec![0.0; value.len()]
    };
    let grads: Vec<_> = g.gradient(&c)?.iter().map(vec_rm).collect();
    let r = grads.len();
    let tg: Vec<_> = grads.iter().map(|v| &t.flat * v).collect();
    let avar = Mat::from_fn(r, r, |a, b| grads[a].dot(&tg[b]));
    Ok(WindowTerm { value, bias, avar, floored })
}

/// Ŝ(g) or S̃(g) from a prepared spot series.
pub fn estimate_from(prep: &Prepared, g: &dyn MatrixFunctional, cfg: &EstimatorConfig) -> Result<FunctionalEstimate> {
    let spot = &prep.spot;
    let plan = &prep.plan;
    if let Some(d) = g.dim() {
        if d != prep.d {
            return Err(Error::Shape(format!("{} needs d = {d}, data has d = {}", g.name(), prep.d)));
        }
    }
    if spot.kept_fraction == 0.0 {
        return Err(Error::Estimation("every pre-average was vetoed by truncation".into()));
    }
    let terms: Result<Vec<WindowTerm>> = spot
        .c_mats
        .par_iter()
        .zip(spot.gamma_mats.par_iter())
        .map(|(c, gm)| window_term(g, c, gm, spot.kind, plan, &prep.kc, cfg.floor_rel, cfg.bias_correction))
        .collect();
    let terms = terms?;
    let r = terms[0].value.len();
    let w = plan.k_n as f64 * plan.delta_n * spot.a_t;
    let mut value = vec![0.0; r];
    let mut uncorrected = vec![0.0; r];
    let mut avar = Mat::zeros(r, r);
    let mut floor_hits = 0;
    for t in &terms {
        for o in 0..r {
            uncorrected[o] += t.value[o];
            value[o] += t.value[o] - t.bias[o];
        }
        avar += &t.avar;
        floor_hits += t.floored as usize;
    }
    for o in 0..r {
        value[o] *= w;
        uncorrected[o] *= w;
    }
    avar *= w;
    if value.iter().chain(&uncorrected).chain(avar.iter()).any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!(
            "{} produced a non-finite estimate (spot matrices at or near zero?)",
            g.name()
        )));
    }
    let mut warnings = plan.warnings.clone();
    let asym = crate::linalg::asymmetry(&avar);
    if asym > 1e-8 * max_abs(&avar).max(1e-300) {
        let msg = format!("asymptotic variance asymmetric by {asym:e}; symmetrised");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let mut avar = symmetrize(&avar);
    if r > 1 && (0..r).all(|j| avar[(j, j)] >= 0.0) && min_eigenvalue(&avar) < 0.0 {
        let msg = "asymptotic variance not PSD; projected onto the PSD cone".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
        avar = crate::linalg::psd_project(&avar)?;
    }
    if floor_hits > 0 {
        warnings.push(format!("eigenvalue floor applied in {floor_hits} of {} windows", spot.n_windows));
    }
    let mut est = FunctionalEstimate {
        functional: g.name(),
        labels: g.labels(prep.d),
        mode: spot.kind,
        value,
        uncorrected,
        avar: (0..r).map(|i| (0..r).map(|j| avar[(i, j)]).collect()).collect(),
        rate_scale: plan.rate_scale(),
        level: cfg.ci_level,
        ci: vec![],
        plan: plan.clone(),
        n: prep.n,
        delta_n: plan.delta_n,
        n_windows: spot.n_windows,
        a_t: spot.a_t,
        floor_hits,
        kept_fraction: spot.kept_fraction,
        warnings,
    };
    est.ci = confidence_interval(&est, cfg.ci_level)?;
    Ok(est)
}

pub fn estimate(grid: &LogPriceGrid, g: &dyn MatrixFunctional, cfg: &EstimatorConfig) -> Result<FunctionalEstimate> {
    let prep = prepare(grid, cfg)?;
    estimate_from(&prep, g, cfg)
}

/// V̂_Ξ(g) (hat series) or Ṽ_Σ(g) (tilde series), symmetrised.
pub fn avar(spot: &SpotVolSeries, g: &dyn MatrixFunctional, plan: &ValidatedPlan, kc: &KernelConstants) -> Result<Mat> {
    let mut acc: Option<Mat> = None;
    for (c, gm) in spot.c_mats.iter().zip(&spot.gamma_mats) {
        let t = window_term(g, c, gm, spot.kind, plan, kc, 0.0, false)?;
        acc = Some(match acc {
            None => t.avar,
            Some(a) => a + t.avar,
        });
    }
    let a = acc.ok_or_else(|| Error::Estimation("empty spot series".into()))?;
    Ok(symmetrize(&(a * (plan.k_n as f64 * plan.delta_n * spot.a_t))))
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(p)
}

pub fn confidence_interval(est: &FunctionalEstimate, level: f64) -> Result<Vec<[f64; 2]>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let z = normal_quantile(0.5 * (1.0 + level));
    let se = est.std_errors()?;
    Ok(est.value.iter().zip(se).map(|(v, s)| [v - z * s, v + z * s]).collect())
}
