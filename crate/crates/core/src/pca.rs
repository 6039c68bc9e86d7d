//! Realized PCA: integrated cluster-averaged eigenvalues and eigenvectors of
//! the volatility matrix with closed-form multiplicative bias corrections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{effective_theta, normal_quantile, prepare, EstimatorConfig};
use crate::functional::{gap_tol, min_cluster_gap, ClusterSpec, GAP_TOL_REL};
use crate::grid::LogPriceGrid;
use crate::kernel::KernelConstants;
use crate::linalg::{eig_sorted, Mat, Vector};
use crate::spot::{EstimatorKind, SpotVolSeries, ValidatedPlan};

/// Largest share of windows the gap test may exclude.
pub const GAP_BUDGET: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcaOptions {
    pub correct: bool,
    pub gap_rel: f64,
}

impl Default for PcaOptions {
    fn default() -> Self {
        PcaOptions { correct: true, gap_rel: GAP_TOL_REL }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSpectrum {
    pub start: usize,
    pub eigenvalues: Vec<f64>,
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenvalueEstimate {
    pub values: Vec<f64>,
    pub uncorrected: Vec<f64>,
    /// Diagonal of the asymptotic covariance; off-diagonals vanish.
    pub avar: Vec<f64>,
    pub excluded_windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenvectorEstimate {
    /// 1-based index of the eigenvector.
    pub index: usize,
    pub vector: Vec<f64>,
    pub uncorrected: Vec<f64>,
    pub avar: Vec<Vec<f64>>,
    pub excluded_windows: usize,
}

fn check_series(spot: &SpotVolSeries) -> Result<()> {
    if spot.kind != EstimatorKind::Tilde {
        return Err(Error::Config("realized PCA needs the psd (tilde) spot series".into()));
    }
    if spot.c_mats.is_empty() {
        return Err(Error::Estimation("empty spot series".into()));
    }
    Ok(())
}

fn budget(excluded: usize, total: usize, what: &str) -> Result<()> {
    if excluded as f64 > GAP_BUDGET * total as f64 {
        return Err(Error::Degeneracy(format!(
            "{excluded} of {total} windows fail the {what} gap test (budget {:.0}%)",
            GAP_BUDGET * 100.0
        )));
    }
    if excluded > 0 {
        log::warn!("{excluded} of {total} windows excluded by the {what} gap test");
    }
    Ok(())
}

/// θΦ₀₀/(φ₀(0)² kₙΔₙ^{1/2+δ})
fn correction_unit(plan: &ValidatedPlan, kc: &KernelConstants) -> f64 {
    effective_theta(plan) * kc.phi00 / (kc.phi0_at_0.powi(2) * plan.bias_scale())
}

fn decompose_all(spot: &SpotVolSeries) -> Result<Vec<(Vector, Mat)>> {
    spot.c_mats.iter().map(eig_sorted).collect()
}

pub fn realized_eigenvalues(
    spot: &SpotVolSeries,
    clusters: &ClusterSpec,
    plan: &ValidatedPlan,
    kc: &KernelConstants,
    opts: PcaOptions,
) -> Result<(EigenvalueEstimate, Vec<WindowSpectrum>)> {
    check_series(spot)?;
    clusters.validate(spot.d())?;
    let unit = correction_unit(plan, kc);
    let kk = clusters.k();
    let mut sum = vec![0.0; kk];
    let mut raw = vec![0.0; kk];
    let mut sq = vec![0.0; kk];
    let mut excluded = 0;
    let mut spectra = Vec::with_capacity(spot.n_windows);
    for ((lam, _), (&start, c)) in decompose_all(spot)?.into_iter().zip(spot.starts.iter().zip(&spot.c_mats)) {
        let bad = kk > 1 && min_cluster_gap(&lam, clusters) <= gap_tol(c, opts.gap_rel);
        spectra.push(WindowSpectrum { start, eigenvalues: lam.iter().cloned().collect(), excluded: bad });
        if bad {
            excluded += 1;
            continue;
        }
        for h in 0..kk {
            let members = clusters.members(h);
            let bar = members.clone().map(|r| lam[r]).sum::<f64>() / clusters.size(h) as f64;
            let mut factor = 1.0;
            if opts.correct {
                let s: f64 = (0..lam.len()).filter(|v| !members.contains(v)).map(|v| lam[v] / (bar - lam[v])).sum();
                factor -= 2.0 * unit * s;
            }
            sum[h] += factor * bar;
            raw[h] += bar;
            sq[h] += bar * bar;
        }
    }
    budget(excluded, spot.n_windows, "inter-cluster")?;
    let used = spot.n_windows - excluded;
    let w = plan.k_n as f64 * plan.delta_n * spot.a_t * spot.n_windows as f64 / used as f64;
    let var_unit = 4.0 * effective_theta(plan) * kc.phi00 / kc.phi0_at_0.powi(2);
    let est = EigenvalueEstimate {
        values: sum.iter().map(|x| x * w).collect(),
        uncorrected: raw.iter().map(|x| x * w).collect(),
        avar: (0..kk).map(|h| var_unit / clusters.size(h) as f64 * sq[h] * w).collect(),
        excluded_windows: excluded,
    };
    Ok((est, spectra))
}

pub fn realized_eigenvectors(
    spot: &SpotVolSeries,
    k: usize,
    plan: &ValidatedPlan,
    kc: &KernelConstants,
    opts: PcaOptions,
) -> Result<EigenvectorEstimate> {
    check_series(spot)?;
    let d = spot.d();
    if k == 0 || k > d {
        return Err(Error::Config(format!("eigenvector index {k} out of range 1..={d}")));
    }
    let r = k - 1;
    let unit = correction_unit(plan, kc);
    let mut sum = Vector::zeros(d);
    let mut raw = Vector::zeros(d);
    let mut av = Mat::zeros(d, d);
    let mut prev: Option<Vector> = None;
    let mut excluded = 0;
    for ((lam, q), c) in decompose_all(spot)?.into_iter().zip(&spot.c_mats) {
        let tol = gap_tol(c, opts.gap_rel);
        let mut gap = f64::INFINITY;
        if r > 0 {
            gap = gap.min(lam[r - 1] - lam[r]);
        }
        if r + 1 < d {
            gap = gap.min(lam[r] - lam[r + 1]);
        }
        if gap <= tol {
            excluded += 1;
            continue;
        }
        let mut v = q.column(r).into_owned();
        if let Some(p) = &prev {
            if v.dot(p) < 0.0 {
                v = -v;
            }
        }
        let mut s = 0.0;
        for u in 0..d {
            if u == r {
                continue;
            }
            let wgt = lam[r] * lam[u] / (lam[r] - lam[u]).powi(2);
            s += wgt;
            let qu = q.column(u);
            av += (qu * qu.transpose()) * wgt;
        }
        let factor = if opts.correct { 1.0 + unit * s } else { 1.0 };
        sum += &v * factor;
        raw += &v;
        prev = Some(v);
    }
    budget(excluded, spot.n_windows, "eigenvalue-simplicity")?;
    let used = spot.n_windows - excluded;
    let w = plan.k_n as f64 * plan.delta_n * spot.a_t * spot.n_windows as f64 / used as f64;
    let var_unit = 2.0 * effective_theta(plan) * kc.phi00 / kc.phi0_at_0.powi(2);
    av *= var_unit * w;
    Ok(EigenvectorEstimate {
        index: k,
        vector: (sum * w).iter().cloned().collect(),
        uncorrected: (raw * w).iter().cloned().collect(),
        avar: (0..d).map(|i| (0..d).map(|j| av[(i, j)]).collect()).collect(),
        excluded_windows: excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizedSpectrum {
    pub clusters: Vec<usize>,
    pub eigenvalues: EigenvalueEstimate,
    pub eigenvalue_ci: Vec<[f64; 2]>,
    pub eigenvectors: Vec<EigenvectorEstimate>,
    pub eigenvector_ci: Vec<Vec<[f64; 2]>>,
    pub rate_scale: f64,
    pub level: f64,
    pub plan: ValidatedPlan,
    pub n: usize,
    pub delta_n: f64,
    pub n_windows: usize,
    pub kept_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window_spectra: Option<Vec<WindowSpectrum>>,
}

fn intervals(values: &[f64], var: &[f64], rate: f64, level: f64) -> Result<Vec<[f64; 2]>> {
    let z = normal_quantile(0.5 * (1.0 + level));
    values
        .iter()
        .zip(var)
        .map(|(&v, &a)| {
            if a < 0.0 {
                return Err(Error::Numeric(format!("negative asymptotic variance {a:e}")));
            }
            let h = z * (rate * a).sqrt();
            Ok([v - h, v + h])
        })
        .collect()
}

/// Full pipeline from a grid: psd spot series, eigenvalues per cluster and the
/// requested eigenvectors (1-based indices).
pub fn realized_pca(
    grid: &LogPriceGrid,
    cfg: &EstimatorConfig,
    clusters: &ClusterSpec,
    vectors: &[usize],
    opts: PcaOptions,
    dump_windows: bool,
) -> Result<RealizedSpectrum> {
    let prep = prepare(grid, cfg)?;
    let (ev, spectra) = realized_eigenvalues(&prep.spot, clusters, &prep.plan, &prep.kc, opts)?;
    let rate = prep.plan.rate_scale();
    let eigenvalue_ci = intervals(&ev.values, &ev.avar, rate, cfg.ci_level)?;
    let mut eigenvectors = vec![];
    let mut eigenvector_ci = vec![];
    for &k in vectors {
        let e = realized_eigenvectors(&prep.spot, k, &prep.plan, &prep.kc, opts)?;
        let diag: Vec<f64> = (0..e.vector.len()).map(|i| e.avar[i][i]).collect();
        eigenvector_ci.push(intervals(&e.vector, &diag, rate, cfg.ci_level)?);
        eigenvectors.push(e);
    }
    Ok(RealizedSpectrum {
        clusters: (0..clusters.k()).map(|h| clusters.size(h)).collect(),
        eigenvalues: ev,
        eigenvalue_ci,
        eigenvectors,
        eigenvector_ci,
        rate_scale: rate,
        level: cfg.ci_level,
        plan: prep.plan.clone(),
        n: prep.n,
        delta_n: grid.delta_n(),
        n_windows: prep.spot.n_windows,
        kept_fraction: prep.spot.kept_fraction,
        window_spectra: if dump_windows { Some(spectra) } else { None },
    })
}
