//! Tuning plans, spot volatility estimators ĉ/c̃ and the noise covariance γ̂.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::IncrementSeries;
use crate::linalg::{psd_project as project, Mat};
use crate::preavg::{PreAveragedSeries, TruncationMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanMode {
    /// Admissible ranges for the rate-optimal estimator.
    RateOptimal,
    /// Looser κ/ρ ranges, valid for polynomial-growth functionals.
    Relaxed,
    /// Larger lₙ, no noise offset; positive semidefinite plug-ins.
    Psd,
}

impl PlanMode {
    pub fn is_psd(self) -> bool {
        self == PlanMode::Psd
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Hat,
    Tilde,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningPlan {
    pub mode: PlanMode,
    pub theta: f64,
    pub varrho: f64,
    pub kappa: f64,
    pub rho: f64,
    #[serde(default)]
    pub delta: f64,
    /// Defaults to θ.
    #[serde(default)]
    pub theta_prime: Option<f64>,
    #[serde(default)]
    pub nu_jump: f64,
}

impl TuningPlan {
    pub fn rate_optimal(theta: f64, varrho: f64, kappa: f64, rho: f64) -> Self {
        TuningPlan { mode: PlanMode::RateOptimal, theta, varrho, kappa, rho, delta: 0.0, theta_prime: None, nu_jump: 0.0 }
    }

    pub fn psd(theta: f64, varrho: f64, kappa: f64, rho: f64, delta: f64) -> Self {
        TuningPlan { mode: PlanMode::Psd, theta, varrho, kappa, rho, delta, theta_prime: None, nu_jump: 0.0 }
    }

    pub fn theta_prime(&self) -> f64 {
        self.theta_prime.unwrap_or(self.theta)
    }

    pub fn validate(&self, delta_n: f64) -> Result<ValidatedPlan> {
        validate_tuning(self, delta_n)
    }
}

/// A plan with its integer windows resolved against Δₙ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidatedPlan {
    pub plan: TuningPlan,
    pub delta_n: f64,
    pub l_n: usize,
    pub k_n: usize,
    pub m_n: usize,
    pub warnings: Vec<String>,
}

impl ValidatedPlan {
    /// Windows given directly, bypassing the exponent constraints. Only the
    /// structural checks (lₙ ≥ 2, kₙ > lₙ, mₙ ≥ 1) apply.
    pub fn explicit(plan: TuningPlan, delta_n: f64, l_n: usize, k_n: usize, m_n: usize) -> Result<Self> {
        structural(l_n, k_n, m_n)?;
        Ok(ValidatedPlan { plan, delta_n, l_n, k_n, m_n, warnings: vec![] })
    }

    pub fn kind(&self) -> EstimatorKind {
        if self.plan.mode.is_psd() {
            EstimatorKind::Tilde
        } else {
            EstimatorKind::Hat
        }
    }

    /// Δₙ^{1/2} (hat) or Δₙ^{1/2−δ} (tilde).
    pub fn rate_scale(&self) -> f64 {
        match self.kind() {
            EstimatorKind::Hat => self.delta_n.sqrt(),
            EstimatorKind::Tilde => self.delta_n.powf(0.5 - self.plan.delta),
        }
    }

    /// kₙΔₙ^{1/2} (hat) or kₙΔₙ^{1/2+δ} (tilde): the bias denominators before the 2.
    pub fn bias_scale(&self) -> f64 {
        let k = self.k_n as f64;
        match self.kind() {
            EstimatorKind::Hat => k * self.delta_n.sqrt(),
            EstimatorKind::Tilde => k * self.delta_n.powf(0.5 + self.plan.delta),
        }
    }
}

fn structural(l_n: usize, k_n: usize, m_n: usize) -> Result<()> {
    if l_n < 2 {
        return Err(Error::Tuning(format!("l_n = {l_n} must be at least 2")));
    }
    if k_n <= l_n {
        return Err(Error::Tuning(format!("k_n = {k_n} must exceed l_n = {l_n}")));
    }
    if m_n < 1 {
        return Err(Error::Tuning("m_n = ⌊θ′Δₙ^{-1/2}⌋ must be at least 1".into()));
    }
    Ok(())
}

struct Checker {
    warnings: Vec<String>,
}

impl Checker {
    /// x ∈ (lo, hi) with optionally closed lower end.
    fn within(&mut self, label: &str, x: f64, lo: f64, lo_closed: bool, hi: f64) -> Result<()> {
        let ok_lo = if lo_closed { x >= lo - 1e-12 } else { x > lo };
        if !ok_lo || x >= hi || lo >= hi {
            let lb = if lo_closed { '[' } else { '(' };
            return Err(Error::Tuning(format!("{label}: {x} not in {lb}{lo:.6}, {hi:.6})")));
        }
        let width = hi - lo;
        if (x - lo) < 0.05 * width || (hi - x) < 0.05 * width {
            self.warnings.push(format!("{label}: {x} within 5% of the boundary of [{lo:.6}, {hi:.6})"));
        }
        Ok(())
    }
}

pub fn validate_tuning(plan: &TuningPlan, delta_n: f64) -> Result<ValidatedPlan> {
    if !(delta_n > 0.0 && delta_n < 1.0) {
        return Err(Error::Config(format!("delta_n must lie in (0, 1), got {delta_n}")));
    }
    for (name, v) in [("theta", plan.theta), ("varrho", plan.varrho), ("theta_prime", plan.theta_prime())] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Tuning(format!("{name} must be positive and finite, got {v}")));
        }
    }
    let nu = plan.nu_jump;
    if !(0.0..1.0).contains(&nu) {
        return Err(Error::Tuning(format!("jump activity ν = {nu} must lie in [0, 1)")));
    }
    let (kappa, rho, delta) = (plan.kappa, plan.rho, plan.delta);
    let mut ck = Checker { warnings: vec![] };
    match plan.mode {
        PlanMode::RateOptimal => {
            if delta != 0.0 {
                return Err(Error::Config("δ applies only to psd plans".into()));
            }
            ck.within("κ ∈ (max(2/3, (2+ν)/4), 3/4)", kappa, (2.0f64 / 3.0).max((2.0 + nu) / 4.0), false, 0.75)?;
            ck.within("ρ ∈ [1/4 + (1−κ)/(2−ν), 1/2)", rho, 0.25 + (1.0 - kappa) / (2.0 - nu), true, 0.5)?;
        }
        PlanMode::Relaxed => {
            if delta != 0.0 {
                return Err(Error::Config("δ applies only to psd plans".into()));
            }
            ck.within("κ ∈ (2/3, 3/4)", kappa, 2.0 / 3.0, false, 0.75)?;
            ck.within("ρ ∈ [1/4 + 1/(4(2−ν)), 1/2)", rho, 0.25 + 1.0 / (4.0 * (2.0 - nu)), true, 0.5)?;
        }
        PlanMode::Psd => {
            ck.within("δ ∈ (1/10, 1/2)", delta, 0.1, false, 0.5)?;
            let lo = (2.0 / 3.0 + 2.0 * delta / 3.0).max((2.0 + nu) / 4.0 + (2.0 - nu) * delta / 2.0);
            ck.within("κ ∈ (max(2/3+2δ/3, (2+ν)/4+(2−ν)δ/2), 3/4+δ/2)", kappa, lo, false, 0.75 + delta / 2.0)?;
            ck.within(
                "ρ ∈ [1/4 + δ/2 + (1−κ)/(2−ν), 1/2)",
                rho,
                0.25 + delta / 2.0 + (1.0 - kappa) / (2.0 - nu),
                true,
                0.5,
            )?;
        }
    }
    let l_exp = if plan.mode.is_psd() { 0.5 + delta } else { 0.5 };
    let l_n = (plan.theta * delta_n.powf(-l_exp)).floor() as usize;
    let k_n = (plan.varrho * delta_n.powf(-kappa)).floor() as usize;
    let m_n = (plan.theta_prime() * delta_n.powf(-0.5)).floor() as usize;
    structural(l_n, k_n, m_n)?;
    for w in &ck.warnings {
        log::warn!("{w}");
    }
    Ok(ValidatedPlan { plan: plan.clone(), delta_n, l_n, k_n, m_n, warnings: ck.warnings })
}

fn window_rows(pre: &PreAveragedSeries, i: usize, plan: &ValidatedPlan) -> Result<std::ops::Range<usize>> {
    if pre.l_n != plan.l_n {
        return Err(Error::Config(format!("pre-averages built with l_n = {}, plan has {}", pre.l_n, plan.l_n)));
    }
    // Ȳ_{i+h}, h = 1..kₙ−lₙ+1, live in rows i .. i+kₙ−lₙ
    let end = i + plan.k_n - plan.l_n + 1;
    if end > pre.ybar.nrows() {
        return Err(Error::Size(format!("window at {i} overruns {} pre-averages", pre.ybar.nrows())));
    }
    Ok(i..end)
}

fn kept_outer_sum(pre: &PreAveragedSeries, mask: &TruncationMask, rows: std::ops::Range<usize>) -> (Mat, usize) {
    let d = pre.ybar.ncols();
    let mut acc = vec![0.0; d * d];
    let mut kept = 0;
    for r in rows {
        if !mask.keep[r] {
            continue;
        }
        kept += 1;
        let y = pre.ybar.row(r);
        for a in 0..d {
            let ya = y[a];
            for b in a..d {
                acc[a * d + b] += ya * y[b];
            }
        }
    }
    let m = Mat::from_fn(d, d, |a, b| if a <= b { acc[a * d + b] } else { acc[b * d + a] });
    (m, kept)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SpotOptions {
    /// Rescale kept outer products by (kₙ−lₙ+1)/kept.
    pub renormalize_kept: bool,
}

fn spot_common(
    pre: &PreAveragedSeries,
    mask: &TruncationMask,
    i: usize,
    plan: &ValidatedPlan,
    with_offset: bool,
    opts: SpotOptions,
) -> Result<Mat> {
    let rows = window_rows(pre, i, plan)?;
    let total = rows.len();
    let (mut s, kept) = kept_outer_sum(pre, mask, rows.clone());
    if opts.renormalize_kept && kept > 0 && kept < total {
        s *= total as f64 / kept as f64;
    }
    if with_offset {
        let off = pre.yhat.as_ref().ok_or_else(|| Error::Config("noise offsets were not computed".into()))?;
        if rows.end > off.count {
            return Err(Error::Size(format!("window at {i} overruns {} noise offsets", off.count)));
        }
        s -= off.window_sum(rows.start, rows.end);
    }
    Ok(s / ((plan.k_n - plan.l_n) as f64 * plan.delta_n))
}

/// ĉ at start index i; symmetric, not necessarily PSD.
pub fn spot_hat(pre: &PreAveragedSeries, mask: &TruncationMask, i: usize, plan: &ValidatedPlan) -> Result<Mat> {
    spot_common(pre, mask, i, plan, true, SpotOptions::default())
}

/// c̃ at start index i; PSD by construction.
pub fn spot_tilde(pre: &PreAveragedSeries, mask: &TruncationMask, i: usize, plan: &ValidatedPlan) -> Result<Mat> {
    spot_common(pre, mask, i, plan, false, SpotOptions::default())
}

/// γ̂ at start index i from increments i+1..i+mₙ (1-based).
pub fn noise_cov(incr: &IncrementSeries, i: usize, plan: &ValidatedPlan) -> Result<Mat> {
    let m = plan.m_n;
    if i + m > incr.len() {
        return Err(Error::Size(format!("noise window at {i} of length {m} overruns {} increments", incr.len())));
    }
    let d = incr.d();
    let mut acc = Mat::zeros(d, d);
    for r in i..i + m {
        let x = incr.values.row(r);
        acc += x.transpose() * x;
    }
    Ok(acc / (2.0 * m as f64))
}

pub fn psd_project(m: &Mat) -> Result<Mat> {
    project(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpotVolSeries {
    pub kind: EstimatorKind,
    pub c_mats: Vec<Mat>,
    pub gamma_mats: Vec<Mat>,
    pub starts: Vec<usize>,
    pub n_windows: usize,
    pub a_t: f64,
    pub k_n: usize,
    pub delta_n: f64,
    /// t = (number of increments)·Δₙ
    pub horizon: f64,
    pub kept_fraction: f64,
}

impl SpotVolSeries {
    pub fn d(&self) -> usize {
        self.c_mats.first().map(|m| m.nrows()).unwrap_or(0)
    }
}

/// Window count and edge adjustment for n increments.
pub fn tiling(n_incr: usize, k_n: usize) -> Result<(usize, f64)> {
    let n_windows = n_incr / k_n;
    if n_windows == 0 {
        return Err(Error::Size(format!("{n_incr} increments hold no window of k_n = {k_n}")));
    }
    Ok((n_windows, n_incr as f64 / (n_windows * k_n) as f64))
}

/// Spot estimates on disjoint windows starting at 0, kₙ, 2kₙ, …
pub fn spot_series(
    incr: &IncrementSeries,
    pre: &PreAveragedSeries,
    mask: &TruncationMask,
    plan: &ValidatedPlan,
    kind: EstimatorKind,
    opts: SpotOptions,
) -> Result<SpotVolSeries> {
    if kind != plan.kind() {
        return Err(Error::Config(format!("{kind:?} estimator requires a matching plan (got {:?})", plan.plan.mode)));
    }
    let (n_windows, a_t) = tiling(incr.len(), plan.k_n)?;
    let starts: Vec<usize> = (0..n_windows).map(|w| w * plan.k_n).collect();
    let with_offset = kind == EstimatorKind::Hat;
    let pairs: Result<Vec<(Mat, Mat)>> = starts
        .par_iter()
        .map(|&i| {
            let c = spot_common(pre, mask, i, plan, with_offset, opts)?;
            let g = noise_cov(incr, i, plan)?;
            Ok((c, g))
        })
        .collect();
    let (c_mats, gamma_mats): (Vec<Mat>, Vec<Mat>) = pairs?.into_iter().unzip();
    Ok(SpotVolSeries {
        kind,
        c_mats,
        gamma_mats,
        starts,
        n_windows,
        a_t,
        k_n: plan.k_n,
        delta_n: plan.delta_n,
        horizon: incr.len() as f64 * plan.delta_n,
        kept_fraction: mask.kept_fraction(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{discretize, KernelProfile};
    use crate::linalg::min_eigenvalue;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    const DN: f64 = 1.0 / 23400.0;

    #[test]
    fn reference_plan_is_valid() {
        let p = TuningPlan::rate_optimal(1.0, 1.0, 0.69, 0.47);
        let v = p.validate(DN).unwrap();
        assert_eq!(v.l_n, (DN.powf(-0.5)).floor() as usize);
        assert_eq!(v.k_n, (DN.powf(-0.69)).floor() as usize);
        assert_eq!(v.m_n, v.l_n);
    }

    #[test]
    fn boundary_violations() {
        let p = TuningPlan::rate_optimal(1.0, 1.0, 0.60, 0.47);
        let e = p.validate(DN).unwrap_err();
        assert!(matches!(e, Error::Tuning(ref m) if m.contains("κ")));
        let p = TuningPlan::psd(1.0, 1.0, 0.8, 0.49, 0.05);
        assert!(matches!(p.validate(DN), Err(Error::Tuning(ref m)) if m.contains("δ")));
        let p = TuningPlan::rate_optimal(1.0, 1.0, 0.69, 0.40);
        assert!(matches!(p.validate(DN), Err(Error::Tuning(ref m)) if m.contains("ρ")));
    }

    #[test]
    fn near_boundary_warns() {
        let p = TuningPlan::rate_optimal(1.0, 1.0, 0.7475, 0.47);
        let v = p.validate(DN).unwrap();
        assert!(!v.warnings.is_empty());
    }

    fn setup(incr_vals: &[f64], l: usize, k: usize, m: usize) -> (IncrementSeries, PreAveragedSeries, ValidatedPlan) {
        let incr = IncrementSeries { values: Mat::from_column_slice(incr_vals.len(), 1, incr_vals), delta_n: 0.01 };
        let dk = discretize(&KernelProfile::minmax(), l).unwrap();
        let pre = PreAveragedSeries::build(&incr, &dk, true, crate::preavg::ConvPath::Direct).unwrap();
        let plan = ValidatedPlan::explicit(TuningPlan::rate_optimal(1.0, 1.0, 0.7, 0.47), 0.01, l, k, m).unwrap();
        (incr, pre, plan)
    }

    #[test]
    fn direct_sums() {
        // lₙ = 2 makes Ȳ equal to the increments, so Ȳ² ≡ v with constant |increment|
        let a = 0.3f64;
        let vals: Vec<f64> = (0..12).map(|i| if i % 2 == 0 { a } else { -a }).collect();
        let (_, mut pre, plan) = setup(&vals, 2, 6, 1);
        pre.yhat = Some(crate::preavg::noise_offset(
            &IncrementSeries { values: Mat::zeros(12, 1), delta_n: 0.01 },
            &discretize(&KernelProfile::minmax(), 2).unwrap(),
        )
        .unwrap());
        let mask = TruncationMask { keep: vec![true; pre.ybar.nrows()] };
        let c = spot_hat(&pre, &mask, 0, &plan).unwrap();
        let want = a * a * 5.0 / (4.0 * 0.01);
        assert!((c[(0, 0)] - want).abs() < 1e-12);
        // single kept term
        let mut keep = vec![false; pre.ybar.nrows()];
        keep[2] = true;
        let c = spot_tilde(&pre, &TruncationMask { keep }, 0, &plan).unwrap();
        assert!((c[(0, 0)] - a * a / (4.0 * 0.01)).abs() < 1e-12);
    }

    #[test]
    fn noise_cov_single() {
        let (incr, _, _) = setup(&[0.7, 0.1, 0.2, 0.3], 2, 3, 1);
        let plan = ValidatedPlan::explicit(TuningPlan::rate_optimal(1.0, 1.0, 0.7, 0.47), 0.01, 2, 3, 1).unwrap();
        assert!((noise_cov(&incr, 0, &plan).unwrap()[(0, 0)] - 0.245).abs() < 1e-15);
    }

    #[test]
    fn tilde_minus_hat_is_offset_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vals: Vec<f64> = (0..400).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (_, pre, plan) = setup(&vals, 5, 40, 3);
        let mask = TruncationMask { keep: vec![true; pre.ybar.nrows()] };
        let h = spot_hat(&pre, &mask, 40, &plan).unwrap();
        let t = spot_tilde(&pre, &mask, 40, &plan).unwrap();
        let off = pre.yhat.as_ref().unwrap().window_sum(40, 40 + 36) / (35.0 * 0.01);
        assert!((t - h - off).norm() < 1e-12);
    }

    #[test]
    fn tiling_edges() {
        assert_eq!(tiling(30, 10).unwrap(), (3, 1.0));
        let (n, a) = tiling(35, 10).unwrap();
        assert_eq!(n, 3);
        assert!((a - 35.0 / 30.0).abs() < 1e-15);
        assert!(tiling(5, 10).is_err());
    }

    #[test]
    fn tilde_series_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 3;
        let n = 600;
        let vals: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let incr = IncrementSeries { values: Mat::from_row_slice(n, d, &vals), delta_n: 0.001 };
        let dk = discretize(&KernelProfile::minmax(), 4).unwrap();
        let pre = PreAveragedSeries::build(&incr, &dk, false, crate::preavg::ConvPath::Direct).unwrap();
        let mask = TruncationMask { keep: vec![true; pre.ybar.nrows()] };
        let plan = ValidatedPlan::explicit(TuningPlan::psd(1.0, 1.0, 0.8, 0.49, 0.2), 0.001, 4, 50, 2).unwrap();
        let s = spot_series(&incr, &pre, &mask, &plan, EstimatorKind::Tilde, SpotOptions::default()).unwrap();
        assert_eq!(s.n_windows, 12);
        assert!(s.c_mats.iter().all(|c| min_eigenvalue(c) >= -1e-12));
        assert!((s.n_windows as f64 * s.k_n as f64 * s.delta_n * s.a_t - s.horizon).abs() < 1e-12);
    }
}
