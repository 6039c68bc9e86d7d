//! Monte-Carlo harness: simulate, estimate, compare with the latent truth.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{simulate_factor, simulate_scalar, Clock, FactorModelParams, ScalarModelParams};
use crate::error::{Error, Result};
use crate::estimate::{estimate_from, normal_quantile, prepare, EstimatorConfig};
use crate::functional::{builtin, ClusterSpec, EigenvalueFunctional, EigenvectorFunctional, FunctionalParams, MatrixFunctional};
use crate::grid::LogPriceGrid;
use crate::pca::{realized_eigenvalues, realized_eigenvectors, PcaOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    Scalar {
        #[serde(default)]
        params: ScalarModelParams,
    },
    Factor {
        d: usize,
        r: usize,
        /// Full parameter set; `default_v1(d, r)` when absent.
        #[serde(default)]
        params: Option<FactorModelParams>,
    },
}

impl ModelSpec {
    pub fn d(&self) -> usize {
        match self {
            ModelSpec::Scalar { .. } => 1,
            ModelSpec::Factor { d, .. } => *d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Target {
    Functional {
        name: String,
        #[serde(default)]
        params: FunctionalParams,
    },
    /// Cluster-averaged eigenvalues, e.g. clusters = "1,1,8".
    Eigenvalues { clusters: String },
    /// Entries (0-based) of the k-th eigenvector (1-based).
    Eigenvector { k: usize, components: Vec<usize> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McEstimator {
    pub label: String,
    pub config: EstimatorConfig,
    pub target: Target,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McStudy {
    pub model: ModelSpec,
    pub clock: Clock,
    pub replications: usize,
    pub master_seed: u64,
    pub estimators: Vec<McEstimator>,
    /// Latent states kept every `truth_stride` steps (factor model).
    #[serde(default = "default_stride")]
    pub truth_stride: usize,
}

fn default_stride() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRecord {
    pub rep: usize,
    pub estimator: String,
    pub component: String,
    pub estimate: f64,
    pub truth: f64,
    pub error: f64,
    pub std_error: f64,
    pub studentized: f64,
    pub ci_hit: bool,
    pub uncorrected: f64,
    /// Empty unless this replication failed for this estimator.
    pub failure: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub estimator: String,
    pub component: String,
    pub reps: usize,
    pub failures: usize,
    pub mean_studentized: f64,
    pub sd_studentized: f64,
    pub coverage: f64,
    pub mean_error: f64,
    pub mean_error_uncorrected: f64,
    pub rmse: f64,
    pub mae: f64,
    pub mae_uncorrected: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McReport {
    pub records: Vec<McRecord>,
    pub summaries: Vec<McSummary>,
    pub floor_hits: usize,
    pub steps: usize,
}

struct Outcome {
    labels: Vec<String>,
    estimate: Vec<f64>,
    uncorrected: Vec<f64>,
    std_error: Vec<f64>,
    truth: Vec<f64>,
}

fn eval(grid: &LogPriceGrid, est: &McEstimator, truth: &dyn Fn(&dyn MatrixFunctional) -> Result<Vec<f64>>) -> Result<Outcome> {
    let d = grid.d();
    match &est.target {
        Target::Functional { name, params } => {
            let g = builtin(name, params)?;
            let prep = prepare(grid, &est.config)?;
            let e = estimate_from(&prep, g.as_ref(), &est.config)?;
            Ok(Outcome {
                labels: e.labels.clone(),
                std_error: e.std_errors()?,
                estimate: e.value,
                uncorrected: e.uncorrected,
                truth: truth(g.as_ref())?,
            })
        }
        Target::Eigenvalues { clusters } => {
            let cl = ClusterSpec::parse(clusters)?;
            cl.validate(d)?;
            let prep = prepare(grid, &est.config)?;
            let opts = PcaOptions { correct: est.config.bias_correction, ..Default::default() };
            let (e, _) = realized_eigenvalues(&prep.spot, &cl, &prep.plan, &prep.kc, opts)?;
            let raw = realized_eigenvalues(&prep.spot, &cl, &prep.plan, &prep.kc, PcaOptions { correct: false, ..opts })?.0;
            let rate = prep.plan.rate_scale();
            Ok(Outcome {
                labels: (1..=cl.k()).map(|h| format!("lambda{h}")).collect(),
                std_error: e.avar.iter().map(|a| (rate * a.max(0.0)).sqrt()).collect(),
                estimate: e.values,
                uncorrected: raw.values,
                truth: truth(&EigenvalueFunctional::new(cl))?,
            })
        }
        Target::Eigenvector { k, components } => {
            if *k == 0 || *k > d {
                return Err(Error::Config(format!("eigenvector index {k} out of range 1..={d}")));
            }
            if let Some(&j) = components.iter().find(|&&j| j >= d) {
                return Err(Error::Config(format!("eigenvector component {j} out of range for d = {d}")));
            }
            let prep = prepare(grid, &est.config)?;
            let opts = PcaOptions { correct: est.config.bias_correction, ..Default::default() };
            let e = realized_eigenvectors(&prep.spot, *k, &prep.plan, &prep.kc, opts)?;
            let rate = prep.plan.rate_scale();
            let full = truth(&EigenvectorFunctional::new(*k - 1))?;
            Ok(Outcome {
                labels: components.iter().map(|j| format!("q{k}_{}", j + 1)).collect(),
                estimate: components.iter().map(|&j| e.vector[j]).collect(),
                uncorrected: components.iter().map(|&j| e.uncorrected[j]).collect(),
                std_error: components.iter().map(|&j| (rate * e.avar[j][j].max(0.0)).sqrt()).collect(),
                truth: components.iter().map(|&j| full[j]).collect(),
            })
        }
    }
}

/// Independent RNG stream per replication.
pub fn rep_rng(master: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(rep as u64);
    rng
}

fn run_rep(study: &McStudy, rep: usize, z: f64) -> Result<(Vec<McRecord>, usize, usize)> {
    let mut rng = rep_rng(study.master_seed, rep);
    let (grid, truth_fn, hits, steps): (LogPriceGrid, Box<dyn Fn(&dyn MatrixFunctional) -> Result<Vec<f64>> + Sync>, usize, usize) =
        match &study.model {
            ModelSpec::Scalar { params } => {
                let path = simulate_scalar(params, &study.clock, 1, &mut rng)?;
                let (h, s) = (path.floor_hits, path.steps);
                (path.grid.clone(), Box::new(move |g| path.truth(g)), h, s)
            }
            ModelSpec::Factor { d, r, params } => {
                let p = params.clone().unwrap_or_else(|| FactorModelParams::default_v1(*d, *r));
                let path = simulate_factor(&p, &study.clock, study.truth_stride, &mut rng)?;
                let (h, s) = (path.floor_hits, path.steps);
                (path.grid.clone(), Box::new(move |g| path.truth(g)), h, s)
            }
        };
    let mut out = vec![];
    for est in &study.estimators {
        match eval(&grid, est, &truth_fn) {
            Ok(o) => {
                for (c, label) in o.labels.iter().enumerate() {
                    let error = o.estimate[c] - o.truth[c];
                    let stud = error / o.std_error[c];
                    out.push(McRecord {
                        rep,
                        estimator: est.label.clone(),
                        component: label.clone(),
                        estimate: o.estimate[c],
                        truth: o.truth[c],
                        error,
                        std_error: o.std_error[c],
                        studentized: stud,
                        ci_hit: stud.abs() <= z,
                        uncorrected: o.uncorrected[c],
                        failure: String::new(),
                    });
                }
            }
            Err(e) => {
                log::warn!("rep {rep}, {}: {e}", est.label);
                out.push(McRecord {
                    rep,
                    estimator: est.label.clone(),
                    component: String::new(),
                    estimate: f64::NAN,
                    truth: f64::NAN,
                    error: f64::NAN,
                    std_error: f64::NAN,
                    studentized: f64::NAN,
                    ci_hit: false,
                    uncorrected: f64::NAN,
                    failure: e.to_string(),
                });
            }
        }
    }
    Ok((out, hits, steps))
}

fn validate_study(study: &McStudy) -> Result<()> {
    if study.replications == 0 {
        return Err(Error::Config("study has zero replications; nothing to report".into()));
    }
    if study.estimators.is_empty() {
        return Err(Error::Config("study lists no estimators".into()));
    }
    for e in &study.estimators {
        if !(e.config.ci_level > 0.0 && e.config.ci_level < 1.0) {
            return Err(Error::Config(format!("{}: CI level must lie in (0, 1)", e.label)));
        }
    }
    study.clock.delta_n()?;
    Ok(())
}

pub fn summarize(records: &[McRecord]) -> Vec<McSummary> {
    let mut keys: Vec<(String, String)> = vec![];
    for r in records.iter().filter(|r| r.failure.is_empty()) {
        let k = (r.estimator.clone(), r.component.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(est, comp)| {
            let ok: Vec<&McRecord> = records.iter().filter(|r| r.estimator == est && r.component == comp).collect();
            let failures = records.iter().filter(|r| r.estimator == est && !r.failure.is_empty()).count();
            let n = ok.len() as f64;
            let mean = |f: &dyn Fn(&McRecord) -> f64| ok.iter().map(|r| f(r)).sum::<f64>() / n;
            let ms = mean(&|r| r.studentized);
            let sd = (ok.iter().map(|r| (r.studentized - ms).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
            McSummary {
                estimator: est,
                component: comp,
                reps: ok.len(),
                failures,
                mean_studentized: ms,
                sd_studentized: sd,
                coverage: mean(&|r| r.ci_hit as u8 as f64),
                mean_error: mean(&|r| r.error),
                mean_error_uncorrected: mean(&|r| r.uncorrected - r.truth),
                rmse: mean(&|r| r.error * r.error).sqrt(),
                mae: mean(&|r| r.error.abs()),
                mae_uncorrected: mean(&|r| (r.uncorrected - r.truth).abs()),
            }
        })
        .collect()
}

/// Replications run in parallel; records come back in replication order.
pub fn run_mc(study: &McStudy) -> Result<McReport> {
    validate_study(study)?;
    let z = normal_quantile(0.5 * (1.0 + study.estimators[0].config.ci_level));
    let mut study = study.clone();
    for e in &mut study.estimators {
        e.config = e.config.clone().with_cached_constants()?;
    }
    let reps: Result<Vec<_>> = (0..study.replications).into_par_iter().map(|rep| run_rep(&study, rep, z)).collect();
    let mut records = vec![];
    let (mut floor_hits, mut steps) = (0, 0);
    for (r, h, s) in reps? {
        records.extend(r);
        floor_hits += h;
        steps += s;
    }
    let summaries = summarize(&records);
    Ok(McReport { records, summaries, floor_hits, steps })
}

impl McReport {
    pub fn write_records_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.records {
            wr.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Kernel density of the studentized errors per estimator and component,
    /// next to the standard normal density, on x ∈ [−4, 4].
    pub fn write_density_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["estimator", "component", "x", "density", "normal"]).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        for s in &self.summaries {
            let z: Vec<f64> = self
                .records
                .iter()
                .filter(|r| r.estimator == s.estimator && r.component == s.component && r.studentized.is_finite())
                .map(|r| r.studentized)
                .collect();
            for (x, f) in density(&z, 81) {
                let phi = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                wr.write_record([s.estimator.clone(), s.component.clone(), format!("{x:?}"), format!("{f:?}"), format!("{phi:?}")])
                    .map_err(|e| Error::Io(std::io::Error::other(e)))?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

/// Gaussian kernel density with Silverman's bandwidth.
pub fn density(z: &[f64], points: usize) -> Vec<(f64, f64)> {
    let n = z.len() as f64;
    if z.len() < 2 {
        return vec![];
    }
    let m = z.iter().sum::<f64>() / n;
    let sd = (z.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let h = 1.06 * sd.max(1e-12) * n.powf(-0.2);
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    (0..points)
        .map(|i| {
            let x = -4.0 + 8.0 * i as f64 / (points - 1) as f64;
            (x, norm * z.iter().map(|v| (-0.5 * ((x - v) / h).powi(2)).exp()).sum::<f64>())
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateRow {
    pub estimator: String,
    pub component: String,
    pub n: Vec<usize>,
    pub rmse: Vec<f64>,
    /// Least-squares slope of log RMSE on log n.
    pub slope: f64,
}

pub fn loglog_slope(n: &[usize], y: &[f64]) -> f64 {
    let x: Vec<f64> = n.iter().map(|&v| (v as f64).ln()).collect();
    let y: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let k = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / k, y.iter().sum::<f64>() / k);
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// RMSE against sample size: reruns `base` with each observation count per
/// day, keeping the number of days fixed.
pub fn rate_study(base: &McStudy, obs_per_day: &[usize]) -> Result<Vec<RateRow>> {
    if obs_per_day.len() < 2 {
        return Err(Error::Config("a rate study needs at least two sample sizes".into()));
    }
    let mut rows: Vec<RateRow> = vec![];
    for &o in obs_per_day {
        let mut st = base.clone();
        st.clock.obs_per_day = o;
        let rep = run_mc(&st)?;
        for s in rep.summaries {
            match rows.iter_mut().find(|r| r.estimator == s.estimator && r.component == s.component) {
                Some(r) => {
                    r.n.push(st.clock.n_obs());
                    r.rmse.push(s.rmse);
                }
                None => rows.push(RateRow {
                    estimator: s.estimator,
                    component: s.component,
                    n: vec![st.clock.n_obs()],
                    rmse: vec![s.rmse],
                    slope: f64::NAN,
                }),
            }
        }
    }
    for r in &mut rows {
        r.slope = loglog_slope(&r.n, &r.rmse);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preavg::{ThresholdScale, TruncationMode, TruncationSpec};
    use crate::spot::TuningPlan;

    fn small_study(reps: usize) -> McStudy {
        let cfg = EstimatorConfig::new(
            TuningPlan::rate_optimal(0.05, 0.1, 0.7, 0.47),
            TruncationSpec::new(TruncationMode::GlobalNorm, 4.0, 0.47, ThresholdScale::Volatility),
        );
        McStudy {
            model: ModelSpec::Scalar { params: ScalarModelParams::default() },
            clock: Clock::new(2340, 2),
            replications: reps,
            master_seed: 9,
            estimators: vec![McEstimator {
                label: "sq".into(),
                config: cfg,
                target: Target::Functional { name: "square".into(), params: FunctionalParams::default() },
            }],
            truth_stride: 1,
        }
    }

    #[test]
    fn zero_reps_rejected() {
        assert!(matches!(run_mc(&small_study(0)), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_and_ordered() {
        let a = run_mc(&small_study(4)).unwrap();
        let b = run_mc(&small_study(4)).unwrap();
        assert_eq!(format!("{:?}", a.records), format!("{:?}", b.records));
        assert!(a.records.iter().all(|r| r.failure.is_empty()), "{:?}", a.records[0].failure);
        assert_eq!(a.records.iter().map(|r| r.rep).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(a.summaries[0].reps + a.summaries[0].failures, 4);
    }

    #[test]
    fn streams_differ() {
        use rand::RngCore;
        assert_ne!(rep_rng(1, 0).next_u64(), rep_rng(1, 1).next_u64());
        assert_eq!(rep_rng(1, 3).next_u64(), rep_rng(1, 3).next_u64());
    }

    #[test]
    fn slope_of_power_law() {
        let n = [100, 200, 400, 800];
        let y: Vec<f64> = n.iter().map(|&v| 3.0 * (v as f64).powf(-0.25)).collect();
        assert!((loglog_slope(&n, &y) + 0.25).abs() < 1e-12);
    }

    #[test]
    fn density_integrates_to_one() {
        let z: Vec<f64> = (0..200).map(|i| ((i as f64) * 0.7).sin()).collect();
        let d = density(&z, 81);
        let s: f64 = d.iter().map(|(_, f)| f * 0.1).sum();
        assert!((s - 1.0).abs() < 0.02);
    }
}
