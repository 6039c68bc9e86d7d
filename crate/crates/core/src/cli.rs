//! Command-line front end: argument parsing, config merging, artifacts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::{Map, Value};
use sha1::{Digest, Sha1};

use crate::error::{Error, Result};
use crate::estimate::{estimate, EstimatorConfig};
use crate::functional::{builtin, ClusterSpec, FunctionalParams};
use crate::grid::LogPriceGrid;
use crate::kernel::{constants, KernelProfile};
use crate::pca::{realized_pca, PcaOptions};
use crate::preavg::{ThresholdScale, TruncationMode, TruncationSpec};
use crate::sim::mc::{rate_study, run_mc, McStudy};
use crate::sim::{simulate_factor, simulate_scalar, Clock, FactorModelParams, ScalarModelParams};
use crate::spot::{PlanMode, TuningPlan};

#[derive(Debug, Parser)]
#[command(name = "volfn", version, about = "Integrated volatility-matrix functionals from noisy high-frequency prices")]
pub struct Cli {
    /// TOML config; flags given on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, short, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate an integrated functional of the volatility matrix.
    Estimate(EstimateArgs),
    /// Realized PCA: integrated eigenvalues and eigenvectors.
    Pca(PcaArgs),
    /// Simulate the scalar or factor model.
    Simulate(SimulateArgs),
    /// Run a Monte-Carlo study described by a TOML file.
    Mc(McArgs),
    /// Print kernel constants.
    KernelConstants(KernelArgs),
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct DataArgs {
    /// CSV with a header row of asset labels, one row per observation.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Observation spacing Δₙ in the chosen time unit.
    #[arg(long)]
    pub delta_n: Option<f64>,
    /// Input holds prices; take logs first.
    #[arg(long)]
    pub raw_prices: bool,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanArgs {
    /// hat (rate-optimal) or tilde (positive semidefinite plug-in).
    #[arg(long)]
    pub mode: Option<String>,
    /// Same as --mode tilde.
    #[arg(long)]
    pub psd: bool,
    /// Tuning range for hat mode: rate-optimal or relaxed.
    #[arg(long)]
    pub plan: Option<String>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub varrho: Option<f64>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    /// psd only.
    #[arg(long)]
    pub delta: Option<f64>,
    /// hat only; noise window scale.
    #[arg(long)]
    pub theta_prime: Option<f64>,
    #[arg(long)]
    pub nu_jump: Option<f64>,
    /// global-norm, elementwise or off.
    #[arg(long)]
    pub trunc_mode: Option<String>,
    #[arg(long)]
    pub trunc_alpha: Option<f64>,
    #[arg(long)]
    pub trunc_rho: Option<f64>,
    /// volatility or variance.
    #[arg(long)]
    pub trunc_scale: Option<String>,
    /// Per-asset variance levels for the threshold, comma separated.
    #[arg(long)]
    pub sigma_bar2: Option<String>,
    #[arg(long)]
    pub ci_level: Option<f64>,
    #[arg(long)]
    pub no_bias_correction: bool,
    #[arg(long)]
    pub kernel: Option<String>,
    /// CSV with columns s,phi,phi_prime.
    #[arg(long)]
    pub kernel_table: Option<PathBuf>,
    #[arg(long)]
    pub quad_mesh: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// trace, entry, square, log, logdet, laplace, beta, eigenvalues, eigenvector
    #[arg(long)]
    pub functional: Option<String>,
    /// 1-based "j,k" for entry.
    #[arg(long)]
    pub entry: Option<String>,
    #[arg(long)]
    pub w: Option<f64>,
    #[arg(long)]
    pub split: Option<usize>,
    /// 1-based eigenvector index.
    #[arg(long)]
    pub index: Option<usize>,
    #[arg(long)]
    pub clusters: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub plan: PlanArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct PcaArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Cluster sizes from the top, e.g. 1,1,8.
    #[arg(long)]
    pub clusters: Option<String>,
    /// 1-based eigenvector indices, e.g. 1,2.
    #[arg(long)]
    pub vectors: Option<String>,
    #[arg(long)]
    pub dump_windows: bool,
    #[arg(long)]
    pub no_correction: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub plan: PlanArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateArgs {
    /// scalar or factor
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub obs_per_day: Option<usize>,
    #[arg(long)]
    pub days: Option<usize>,
    /// Trading days per unit of time; model parameters are per unit.
    #[arg(long)]
    pub days_per_unit: Option<f64>,
    /// Keep every stride-th latent state (factor model).
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(skip)]
    pub scalar_params: Option<ScalarModelParams>,
    #[arg(skip)]
    pub factor_params: Option<FactorModelParams>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct McArgs {
    #[arg(long)]
    pub reps: Option<usize>,
    /// Write studentized-error density tables next to the normal curve.
    #[arg(long)]
    pub plot_data: bool,
    /// Observations per day for an RMSE-vs-n study, comma separated.
    #[arg(long)]
    pub rate: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelArgs {
    #[arg(long)]
    pub kernel: Option<String>,
    #[arg(long)]
    pub kernel_table: Option<PathBuf>,
    #[arg(long)]
    pub mesh: Option<usize>,
}

fn strip_unset(v: Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(
            m.into_iter()
                .filter(|(_, x)| !(x.is_null() || *x == Value::Bool(false)))
                .map(|(k, x)| (k, strip_unset(x)))
                .collect(),
        ),
        other => other,
    }
}

/// Overlay set flags on the config file and check the file for unknown keys.
fn merge<T: Serialize + DeserializeOwned + Default>(flags: &T, config: Option<&Path>) -> Result<T> {
    let to_json = |x: &T| serde_json::to_value(x).map_err(|e| Error::Config(e.to_string()));
    let mut base = Map::new();
    if let Some(path) = config {
        let text = fs::read_to_string(path)?;
        let table: toml::Value = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let v = serde_json::to_value(table).map_err(|e| Error::Config(e.to_string()))?;
        let known = match to_json(&T::default())? {
            Value::Object(m) => m,
            _ => Map::new(),
        };
        if let Value::Object(m) = v {
            for (k, x) in m {
                if !known.contains_key(&k) {
                    return Err(Error::Config(format!("unknown key {k:?} in {}", path.display())));
                }
                base.insert(k, x);
            }
        }
    }
    if let Value::Object(m) = strip_unset(to_json(flags)?) {
        for (k, x) in m {
            base.insert(k, x);
        }
    }
    serde_json::from_value(Value::Object(base)).map_err(|e| Error::Config(e.to_string()))
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|t| t.trim().parse::<T>().map_err(|_| Error::Config(format!("cannot parse {what} entry {t:?}"))))
        .collect()
}

fn enum_value<T: DeserializeOwned>(s: &str, what: &str, choices: &str) -> Result<T> {
    serde_json::from_value(Value::String(s.to_string()))
        .map_err(|_| Error::Config(format!("unknown {what} {s:?} (expected {choices})")))
}

/// Turn merged plan flags into an estimator configuration.
pub fn estimator_config(p: &PlanArgs, default_tilde: bool) -> Result<EstimatorConfig> {
    let tilde = match (p.mode.as_deref(), p.psd) {
        (Some("hat"), true) => return Err(Error::Config("--psd conflicts with --mode hat".into())),
        (Some("hat"), false) => false,
        (Some("tilde"), _) => true,
        (Some(other), _) => return Err(Error::Config(format!("unknown mode {other:?} (expected hat or tilde)"))),
        (None, psd) => psd || default_tilde,
    };
    if tilde {
        if p.theta_prime.is_some() {
            return Err(Error::Config("--theta-prime applies only to --mode hat (the psd estimator has no noise offset)".into()));
        }
        if p.plan.as_deref().is_some_and(|x| x != "psd") {
            return Err(Error::Config("--plan rate-optimal/relaxed applies only to --mode hat".into()));
        }
    } else if p.delta.is_some() {
        return Err(Error::Config("--delta applies only to --mode tilde (--psd)".into()));
    }
    let mut plan = if tilde {
        TuningPlan::psd(1.0, 1.0, 0.79, 0.47, p.delta.unwrap_or(0.15))
    } else {
        let mode: PlanMode = match p.plan.as_deref() {
            None => PlanMode::RateOptimal,
            Some(s) => enum_value(s, "plan", "rate-optimal or relaxed")?,
        };
        if mode.is_psd() {
            return Err(Error::Config("--plan psd requires --mode tilde".into()));
        }
        TuningPlan { mode, ..TuningPlan::rate_optimal(1.0, 1.0, 0.7, 0.47) }
    };
    if let Some(x) = p.theta {
        plan.theta = x;
    }
    if let Some(x) = p.varrho {
        plan.varrho = x;
    }
    if let Some(x) = p.kappa {
        plan.kappa = x;
    }
    if let Some(x) = p.rho {
        plan.rho = x;
    }
    plan.theta_prime = p.theta_prime;
    plan.nu_jump = p.nu_jump.unwrap_or(0.0);
    let mode: TruncationMode = enum_value(p.trunc_mode.as_deref().unwrap_or("elementwise"), "truncation mode", "global-norm, elementwise or off")?;
    let scale: ThresholdScale = enum_value(p.trunc_scale.as_deref().unwrap_or("volatility"), "threshold scale", "volatility or variance")?;
    let trunc = TruncationSpec::new(mode, p.trunc_alpha.unwrap_or(1.5), p.trunc_rho.unwrap_or(0.47), scale);
    let mut cfg = EstimatorConfig::new(plan, trunc);
    if let Some(s) = &p.sigma_bar2 {
        cfg.sigma_bar2 = Some(parse_list(s, "sigma-bar2")?);
    }
    if let Some(x) = p.ci_level {
        if !(x > 0.0 && x < 1.0) {
            return Err(Error::Config(format!("CI level {x} must lie in (0, 1)")));
        }
        cfg.ci_level = x;
    }
    cfg.bias_correction = !p.no_bias_correction;
    cfg.kernel = load_kernel(p.kernel.as_deref(), p.kernel_table.as_deref())?;
    if let Some(m) = p.quad_mesh {
        cfg.quad_mesh = m;
    }
    Ok(cfg)
}

fn load_kernel(name: Option<&str>, table: Option<&Path>) -> Result<KernelProfile> {
    match (name, table) {
        (Some(_), Some(_)) => Err(Error::Config("give either --kernel or --kernel-table, not both".into())),
        (_, Some(t)) => {
            let k = KernelProfile::load_csv(t)?;
            k.validate()?;
            Ok(k)
        }
        (Some(n), None) => KernelProfile::by_name(n),
        (None, None) => Ok(KernelProfile::minmax()),
    }
}

fn load_grid(d: &DataArgs) -> Result<(LogPriceGrid, PathBuf)> {
    let input = d.input.clone().ok_or_else(|| Error::Config("--input is required".into()))?;
    let dn = d.delta_n.ok_or_else(|| Error::Config("--delta-n is required".into()))?;
    Ok((LogPriceGrid::load_csv(&input, dn, d.raw_prices)?, input))
}

/// Git blob hash of a byte string.
pub fn blob_sha1(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
struct FileRecord {
    path: String,
    blob_sha1: String,
}

#[derive(Debug, Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: Value,
    inputs: Vec<FileRecord>,
    outputs: Vec<FileRecord>,
}

struct Run {
    out: PathBuf,
    command: &'static str,
    config: Value,
    inputs: Vec<FileRecord>,
    outputs: Vec<FileRecord>,
}

impl Run {
    fn new(out: Option<&Path>, command: &'static str) -> Result<Self> {
        let out = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&out)?;
        Ok(Run { out, command, config: Value::Null, inputs: vec![], outputs: vec![] })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path)?;
        self.inputs.push(FileRecord { path: path.display().to_string(), blob_sha1: blob_sha1(&bytes) });
        Ok(())
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.out.join(name), bytes)?;
        self.outputs.push(FileRecord { path: name.to_string(), blob_sha1: blob_sha1(bytes) });
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<Vec<u8>> {
        let mut s = serde_json::to_vec_pretty(v).map_err(|e| Error::Numeric(e.to_string()))?;
        s.push(b'\n');
        self.write(name, &s)?;
        Ok(s)
    }

    fn finish(self) -> Result<()> {
        let m = Manifest {
            tool: "volfn",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let mut s = serde_json::to_vec_pretty(&m).map_err(|e| Error::Numeric(e.to_string()))?;
        s.push(b'\n');
        fs::write(self.out.join("manifest.json"), s)?;
        Ok(())
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn functional_params(a: &EstimateArgs) -> Result<FunctionalParams> {
    let entry = match &a.entry {
        Some(s) => {
            let v: Vec<usize> = parse_list(s, "entry")?;
            if v.len() != 2 {
                return Err(Error::Config(format!("--entry needs two indices j,k, got {s:?}")));
            }
            Some((v[0], v[1]))
        }
        None => None,
    };
    Ok(FunctionalParams { entry, w: a.w, split: a.split, clusters: a.clusters.clone(), index: a.index })
}

fn cmd_estimate(cli: &Cli, flags: &EstimateArgs) -> Result<()> {
    let a: EstimateArgs = merge(flags, cli.config.as_deref())?;
    let name = a.functional.clone().ok_or_else(|| Error::Config("--functional is required".into()))?;
    let g = builtin(&name, &functional_params(&a)?)?;
    let cfg = estimator_config(&a.plan, false)?;
    let mut run = Run::new(cli.out.as_deref(), "estimate")?;
    run.config = to_value(&a);
    let (grid, input) = load_grid(&a.data)?;
    run.input(&input)?;
    let est = estimate(&grid, g.as_ref(), &cfg)?;
    let bytes = run.write_json("estimate.json", &est)?;
    std::io::stdout().write_all(&bytes)?;
    run.finish()
}

fn cmd_pca(cli: &Cli, flags: &PcaArgs) -> Result<()> {
    let a: PcaArgs = merge(flags, cli.config.as_deref())?;
    let clusters = ClusterSpec::parse(a.clusters.as_deref().ok_or_else(|| Error::Config("--clusters is required".into()))?)?;
    let vectors: Vec<usize> = match &a.vectors {
        Some(s) => parse_list(s, "vectors")?,
        None => vec![],
    };
    if a.plan.mode.as_deref() == Some("hat") {
        return Err(Error::Config("realized PCA uses the psd estimator; --mode hat is not available".into()));
    }
    let cfg = estimator_config(&a.plan, true)?;
    let mut run = Run::new(cli.out.as_deref(), "pca")?;
    run.config = to_value(&a);
    let (grid, input) = load_grid(&a.data)?;
    run.input(&input)?;
    let opts = PcaOptions { correct: !a.no_correction, ..Default::default() };
    let spec = realized_pca(&grid, &cfg, &clusters, &vectors, opts, a.dump_windows)?;
    let bytes = run.write_json("pca.json", &spec)?;
    std::io::stdout().write_all(&bytes)?;
    run.finish()
}

fn rng_for(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

fn csv_bytes(header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> Result<Vec<u8>> {
    let mut wr = csv::Writer::from_writer(vec![]);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    wr.write_record(header).map_err(io)?;
    for r in rows {
        wr.write_record(r.iter().map(|x| format!("{x:?}"))).map_err(io)?;
    }
    wr.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

fn cmd_simulate(cli: &Cli, flags: &SimulateArgs) -> Result<()> {
    let a: SimulateArgs = merge(flags, cli.config.as_deref())?;
    let seed = cli.seed.unwrap_or(0);
    let model = a.model.clone().unwrap_or_else(|| "scalar".into());
    let mut run = Run::new(cli.out.as_deref(), "simulate")?;
    let mut rng = rng_for(seed);
    let mut cfg = to_value(&a);
    if let Value::Object(m) = &mut cfg {
        m.insert("seed".into(), Value::from(seed));
    }
    match model.as_str() {
        "scalar" => {
            let clock = Clock { obs_per_day: a.obs_per_day.unwrap_or(23400), days: a.days.unwrap_or(21), days_per_unit: a.days_per_unit.unwrap_or(252.0) };
            let params = a.scalar_params.clone().unwrap_or_default();
            let path = simulate_scalar(&params, &clock, 1, &mut rng)?;
            let mut buf = vec![];
            path.grid.write_csv(&mut buf)?;
            run.write("grid.csv", &buf)?;
            let dn = path.grid.delta_n();
            let latent = csv_bytes(
                &["t".into(), "c".into(), "x".into(), "noise".into()],
                (0..path.grid.n()).map(|i| vec![i as f64 * dn, path.c_fine[i], path.x[i], path.noise[i]]),
            )?;
            run.write("latent.csv", &latent)?;
            if let Value::Object(m) = &mut cfg {
                m.insert("scalar_params".into(), to_value(&params));
                m.insert("delta_n".into(), Value::from(dn));
                m.insert("floor_hits".into(), Value::from(path.floor_hits));
            }
        }
        "factor" => {
            let clock = Clock { obs_per_day: a.obs_per_day.unwrap_or(22800), days: a.days.unwrap_or(21), days_per_unit: a.days_per_unit.unwrap_or(252.0) };
            let (d, r) = (a.d.unwrap_or(30), a.r.unwrap_or(3));
            let params = a.factor_params.clone().unwrap_or_else(|| FactorModelParams::default_v1(d, r));
            let path = simulate_factor(&params, &clock, a.stride.unwrap_or(10), &mut rng)?;
            let mut buf = vec![];
            path.grid.write_csv(&mut buf)?;
            run.write("grid.csv", &buf)?;
            let dn = path.grid.delta_n();
            let d = params.d;
            let mut header = vec!["t".to_string()];
            for j in 0..d {
                for k in j..d {
                    header.push(format!("c_{}_{}", j + 1, k + 1));
                }
            }
            let latent = csv_bytes(
                &header,
                path.latent.iter().enumerate().map(|(s, st)| {
                    let c = st.c(d);
                    let mut row = vec![(s * path.stride) as f64 * dn];
                    for j in 0..d {
                        for k in j..d {
                            row.push(c[(j, k)]);
                        }
                    }
                    row
                }),
            )?;
            run.write("latent.csv", &latent)?;
            if let Value::Object(m) = &mut cfg {
                m.insert("factor_params".into(), to_value(&params));
                m.insert("delta_n".into(), Value::from(dn));
                m.insert("floor_hits".into(), Value::from(path.floor_hits));
            }
        }
        other => return Err(Error::Config(format!("unknown model {other:?} (scalar or factor)"))),
    }
    run.config = cfg;
    run.finish()
}

#[derive(Debug, Serialize, Deserialize)]
struct McSummaryFile {
    summaries: Vec<crate::sim::mc::McSummary>,
    floor_hits: usize,
    steps: usize,
}

fn cmd_mc(cli: &Cli, a: &McArgs) -> Result<()> {
    let path = cli.config.clone().ok_or_else(|| Error::Config("mc needs --config <study.toml>".into()))?;
    let text = fs::read_to_string(&path)?;
    let mut study: McStudy = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if let Some(r) = a.reps {
        study.replications = r;
    }
    if let Some(s) = cli.seed {
        study.master_seed = s;
    }
    let mut run = Run::new(cli.out.as_deref(), "mc")?;
    run.input(&path)?;
    run.config = to_value(&study);
    let report = run_mc(&study)?;
    let mut buf = vec![];
    report.write_records_csv(&mut buf)?;
    run.write("records.csv", &buf)?;
    let summary = McSummaryFile { summaries: report.summaries.clone(), floor_hits: report.floor_hits, steps: report.steps };
    let bytes = run.write_json("summary.json", &summary)?;
    if a.plot_data {
        let mut buf = vec![];
        report.write_density_csv(&mut buf)?;
        run.write("density.csv", &buf)?;
    }
    if let Some(list) = &a.rate {
        let n: Vec<usize> = parse_list(list, "rate")?;
        let rows = rate_study(&study, &n)?;
        run.write_json("rate.json", &rows)?;
    }
    std::io::stdout().write_all(&bytes)?;
    run.finish()
}

fn cmd_kernel(cli: &Cli, flags: &KernelArgs) -> Result<()> {
    let a: KernelArgs = merge(flags, cli.config.as_deref())?;
    let k = load_kernel(a.kernel.as_deref(), a.kernel_table.as_deref())?;
    let kc = constants(&k, a.mesh.unwrap_or(1000))?;
    let mut run = Run::new(cli.out.as_deref(), "kernel-constants")?;
    if let Some(t) = &a.kernel_table {
        run.input(t)?;
    }
    run.config = to_value(&a);
    #[derive(Serialize)]
    struct Out<'a> {
        kernel: &'a str,
        constants: crate::kernel::KernelConstants,
    }
    let bytes = run.write_json("kernel_constants.json", &Out { kernel: k.name(), constants: kc })?;
    std::io::stdout().write_all(&bytes)?;
    run.finish()
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Estimate(a) => cmd_estimate(cli, a),
        Command::Pca(a) => cmd_pca(cli, a),
        Command::Simulate(a) => cmd_simulate(cli, a),
        Command::Mc(a) => cmd_mc(cli, a),
        Command::KernelConstants(a) => cmd_kernel(cli, a),
    }
}

/// Parse, run, and map errors onto exit codes.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("volfn: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git() {
        // `git hash-object --stdin` on the same bytes
        assert_eq!(blob_sha1(b"hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
        assert_eq!(blob_sha1(b""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    }

    #[test]
    fn hat_rejects_psd_flags() {
        let p = PlanArgs { mode: Some("hat".into()), delta: Some(0.2), ..Default::default() };
        assert!(matches!(estimator_config(&p, false), Err(Error::Config(_))));
        let p = PlanArgs { mode: Some("hat".into()), psd: true, ..Default::default() };
        assert!(matches!(estimator_config(&p, false), Err(Error::Config(_))));
        let p = PlanArgs { psd: true, theta_prime: Some(1.0), ..Default::default() };
        assert!(matches!(estimator_config(&p, false), Err(Error::Config(_))));
    }

    #[test]
    fn flags_override_config() {
        let dir = std::env::temp_dir().join(format!("volfn-merge-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let f = dir.join("c.toml");
        fs::write(&f, "functional = \"trace\"\ntheta = 0.5\nkappa = 0.71\n").unwrap();
        let flags = EstimateArgs { plan: PlanArgs { theta: Some(2.0), ..Default::default() }, ..Default::default() };
        let m: EstimateArgs = merge(&flags, Some(&f)).unwrap();
        assert_eq!(m.plan.theta, Some(2.0));
        assert_eq!(m.plan.kappa, Some(0.71));
        assert_eq!(m.functional.as_deref(), Some("trace"));
        fs::write(&f, "thetta = 0.5\n").unwrap();
        assert!(matches!(merge(&flags, Some(&f)), Err(Error::Config(_))));
        fs::remove_dir_all(&dir).ok();
    }
}
