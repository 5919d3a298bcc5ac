//! `ctf` command-line interface.
//!
//! Exit status: 0 on success, 1 on usage errors or malformed input, 2 when
//! the requested error level cannot be met (numerical infeasibility).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ctf_core::active_cells::{cell_pvalues_with, estimate_j, DEFAULT_GRID};
use ctf_core::ctf_parametric::{run_parametric_test_with, ThresholdReport};
use ctf_core::ctf_permutation::{
    choose_np_thresholds, np_fwer_bound, run_nonparametric_test_with, threshold_ratio,
};
use ctf_core::harness::{run_null_fwer_experiment, run_power_experiment, ExperimentSpec};
use ctf_core::linear_scores::{read_dataset_csv, write_dataset_csv, write_partition_csv};
use ctf_core::{
    fwer_bound, generate_dataset, optimize_thresholds, ActiveCellEstimate, CtfError, CtfThresholds,
    DatasetF64, DiscoverySet, PermutationPlan, PowerTarget, Projections, ScoreKind, SimConfig,
    TargetRule, FORMAT_VERSION,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "ctf",
    version,
    about = "Coarse-to-fine multiple testing with FWER control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Optimize parametric thresholds and print them with their bounds.
    Thresholds(ThresholdArgs),
    /// Run the parametric test on a dataset.
    Test(TestArgs),
    /// Run the permutation test on a dataset.
    Permtest(PermArgs),
    /// Estimate an upper bound on the number of active cells.
    EstimateJ(EstimateArgs),
    /// Run a power experiment from a spec file.
    Simulate(SimArgs),
    /// Run a global-null FWER experiment from a spec file.
    NullCheck(SimArgs),
    /// Write a simulated dataset and partition as CSV.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
struct TargetArgs {
    /// Cell-level noncentrality rate; with --rho-v overrides the default rule.
    #[arg(long, requires = "rho_v")]
    rho_g: Option<f64>,
    #[arg(long, requires = "rho_g")]
    rho_v: Option<f64>,
    /// Index effect size for the effect-size rule.
    #[arg(long, conflicts_with = "rho_g")]
    eta: Option<f64>,
    /// Active indices per active cell for the effect-size rule.
    #[arg(long, default_value_t = 1)]
    actives_per_cell: usize,
}

impl TargetArgs {
    fn target(&self, n: usize, nu_g: u32, j: usize) -> ctf_core::Result<PowerTarget<f64>> {
        match (self.rho_g, self.rho_v, self.eta) {
            (Some(g), Some(v), _) => PowerTarget::new(g, v, n, nu_g, j),
            (_, _, Some(eta)) => TargetRule::EffectSize {
                eta,
                actives_per_cell: self.actives_per_cell,
            }
            .target(n, nu_g, j),
            _ => TargetRule::Default.target(n, nu_g, j),
        }
    }
}

#[derive(Debug, Args)]
struct ThresholdArgs {
    #[arg(long)]
    alpha: f64,
    #[arg(long)]
    n_vars: usize,
    #[arg(long)]
    cell_size: u32,
    /// Upper bound on the number of active cells.
    #[arg(long)]
    j: usize,
    /// Sample size.
    #[arg(long)]
    n: usize,
    #[command(flatten)]
    target: TargetArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset CSV: column `y`, then one column per variable.
    #[arg(long)]
    data: PathBuf,
    /// Partition CSV with header `variable_id,cell_id`.
    #[arg(long)]
    partition: PathBuf,
    /// Known variance of the response; estimated from the data otherwise.
    #[arg(long)]
    sigma_y_sq: Option<f64>,
}

impl DataArgs {
    fn load(&self) -> ctf_core::Result<DatasetF64> {
        let d: DatasetF64 = read_dataset_csv(&self.data, &self.partition)?;
        match self.sigma_y_sq {
            Some(s) => d.with_sigma_y_sq(s),
            None => Ok(d),
        }
    }
}

#[derive(Debug, Args)]
struct TestArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Explicit cell threshold (score scale); requires --theta-v.
    #[arg(long, requires = "theta_v")]
    theta_g: Option<f64>,
    #[arg(long, requires = "theta_g")]
    theta_v: Option<f64>,
    /// FWER level used to optimize thresholds when they are not given.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Active-cell bound used by the optimizer.
    #[arg(long, default_value_t = 1)]
    j: usize,
    #[command(flatten)]
    target: TargetArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PermArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Number of sampled permutations.
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Explicit thresholds; all four must be given together.
    #[arg(long, requires_all = ["theta_v", "theta_v_prime", "epsilon_g"])]
    theta_g: Option<f64>,
    #[arg(long, requires = "theta_g")]
    theta_v: Option<f64>,
    #[arg(long, requires = "theta_g")]
    theta_v_prime: Option<f64>,
    #[arg(long, requires = "theta_g")]
    epsilon_g: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 1)]
    j: usize,
    /// θ_V/θ_G; matched to the parametric optimum when omitted.
    #[arg(long)]
    ratio: Option<f64>,
    /// Score family: `rss` or `squared_correlation`.
    #[arg(long, default_value = "rss")]
    score: ScoreKind,
    #[command(flatten)]
    target: TargetArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// CSV with header `cell_id,pvalue`.
    #[arg(long, conflicts_with_all = ["data", "partition"])]
    pvalues: Option<PathBuf>,
    #[arg(long, requires = "partition")]
    data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    partition: Option<PathBuf>,
    #[arg(long)]
    sigma_y_sq: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated grid inside (0, 1).
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimArgs {
    /// ExperimentSpec JSON file.
    #[arg(long)]
    spec: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long, env = "CTF_THREADS")]
    threads: Option<usize>,
    /// Emit JSON instead of CSV.
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// SimConfig JSON file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    partition: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TestReport {
    pub format_version: u32,
    pub detected_names: Vec<String>,
    pub discoveries: DiscoverySet<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PermReport {
    pub format_version: u32,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub thresholds: CtfThresholds<f64>,
    pub bound_value: Option<f64>,
    pub detected_names: Vec<String>,
    pub discoveries: DiscoverySet<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EstimateReport {
    pub format_version: u32,
    #[serde(flatten)]
    pub estimate: ActiveCellEstimate<f64>,
}

enum Failure {
    Usage(String),
    Core(CtfError),
}

impl From<CtfError> for Failure {
    fn from(e: CtfError) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(CtfError::Io(e))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Core(CtfError::Json(e))
    }
}

/// Runs the CLI on `argv` (including the program name) and returns the exit
/// status instead of exiting.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            if e.is_infeasible() {
                EXIT_INFEASIBLE
            } else {
                EXIT_USAGE
            }
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}

fn json<T: Serialize>(value: &T) -> Result<String, Failure> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn uniform_cell_size(data: &DatasetF64) -> Result<u32, Failure> {
    let p = data.partition();
    let nu = p.nu_g_max();
    if p.cells().iter().any(|c| c.len() != nu) {
        return Err(Failure::Usage(
            "threshold optimization needs equal cell sizes; pass explicit thresholds".into(),
        ));
    }
    u32::try_from(nu).map_err(|_| Failure::Usage("cell too large".into()))
}

fn names(data: &DatasetF64, set: &DiscoverySet<f64>) -> Vec<String> {
    set.detected
        .iter()
        .map(|&v| data.variable_names()[v].clone())
        .collect()
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Thresholds(a) => {
            let target = a.target.target(a.n, a.cell_size, a.j)?;
            let opt = optimize_thresholds(a.alpha, a.n_vars, a.cell_size, &target)?;
            let report = ThresholdReport::new(&opt, a.alpha, a.n_vars, &target);
            emit(a.out.as_deref(), &json(&report)?)
        }
        Command::Test(a) => {
            let data = a.data.load()?;
            let nu = data.partition().nu_g_max() as u32;
            let (thresholds, bound) = match (a.theta_g, a.theta_v) {
                (Some(g), Some(v)) => {
                    let th = CtfThresholds::parametric(g, v)?;
                    let bound = (g > 0.0 && v > 0.0)
                        .then(|| fwer_bound(g, v, data.n_vars(), nu, a.j).ok())
                        .flatten();
                    (th, bound)
                }
                _ => {
                    let nu = uniform_cell_size(&data)?;
                    let target = a.target.target(data.n_samples(), nu, a.j)?;
                    let opt = optimize_thresholds(a.alpha, data.n_vars(), nu, &target)?;
                    (opt.thresholds, Some(opt.fwer_bound))
                }
            };
            let proj = Projections::new(&data);
            let mut set = run_parametric_test_with(&proj, data.partition(), &thresholds)?;
            if let Some(b) = bound {
                set = set.with_fwer_bound(b);
            }
            let report = TestReport {
                format_version: FORMAT_VERSION,
                detected_names: names(&data, &set),
                discoveries: set,
            };
            emit(a.out.as_deref(), &json(&report)?)
        }
        Command::Permtest(a) => {
            let data = a.data.load()?;
            let nu = data.partition().nu_g_max();
            let thresholds = match (a.theta_g, a.theta_v, a.theta_v_prime, a.epsilon_g) {
                (Some(g), Some(v), Some(vp), Some(e)) => CtfThresholds::nonparametric(g, v, vp, e)?,
                _ => {
                    let ratio = match a.ratio {
                        Some(r) => r,
                        None => {
                            let nu32 = uniform_cell_size(&data)?;
                            let target = a.target.target(data.n_samples(), nu32, a.j)?;
                            let opt = optimize_thresholds(a.alpha, data.n_vars(), nu32, &target)?;
                            threshold_ratio(opt.thresholds.theta_g, opt.thresholds.theta_v, nu32)?
                        }
                    };
                    choose_np_thresholds(a.alpha, data.n_vars(), nu, a.j, a.k, ratio)?
                }
            };
            let plan = PermutationPlan::sample(data.n_samples(), a.k, a.seed)?;
            let proj = Projections::new(&data);
            let mut set =
                run_nonparametric_test_with(&proj, data.partition(), a.score, &plan, &thresholds)?;
            let bound = np_fwer_bound(
                data.n_vars(),
                nu,
                a.j,
                a.k,
                thresholds.theta_g,
                thresholds.epsilon_g.unwrap_or(0.0),
                thresholds.theta_v,
                thresholds.theta_v_prime.unwrap_or(1.0),
            )
            .ok();
            if let Some(b) = bound {
                set = set.with_fwer_bound(b);
            }
            let report = PermReport {
                format_version: FORMAT_VERSION,
                k: a.k,
                seed: a.seed,
                thresholds,
                bound_value: bound,
                detected_names: names(&data, &set),
                discoveries: set,
            };
            emit(a.out.as_deref(), &json(&report)?)
        }
        Command::EstimateJ(a) => {
            let pvalues = match (&a.pvalues, &a.data, &a.partition) {
                (Some(path), _, _) => read_pvalues(path)?,
                (None, Some(d), Some(p)) => {
                    let args = DataArgs {
                        data: d.clone(),
                        partition: p.clone(),
                        sigma_y_sq: a.sigma_y_sq,
                    };
                    let data = args.load()?;
                    let proj = Projections::new(&data);
                    cell_pvalues_with(&proj, data.partition())?
                        .into_iter()
                        .map(|p| p.unwrap_or(1.0))
                        .collect()
                }
                _ => {
                    return Err(Failure::Usage(
                        "give --pvalues or both --data and --partition".into(),
                    ))
                }
            };
            let grid = a.grid.clone().unwrap_or_else(|| DEFAULT_GRID.to_vec());
            let estimate = estimate_j(&pvalues, &grid, a.epsilon, a.seed)?;
            let report = EstimateReport {
                format_version: FORMAT_VERSION,
                estimate,
            };
            emit(a.out.as_deref(), &json(&report)?)
        }
        Command::Simulate(a) => {
            let spec = read_spec(&a.spec)?;
            let table = run_power_experiment(&spec, a.threads)?;
            let text = if a.json {
                json(&table)?
            } else {
                table.to_csv()
            };
            emit(a.out.as_deref(), &text)
        }
        Command::NullCheck(a) => {
            let spec = read_spec(&a.spec)?;
            let table = run_null_fwer_experiment(&spec, a.threads)?;
            let text = if a.json {
                json(&table)?
            } else {
                table.to_csv()
            };
            emit(a.out.as_deref(), &text)
        }
        Command::Generate(a) => {
            let text = fs::read_to_string(&a.config)?;
            let cfg: SimConfig = serde_json::from_str(&text)?;
            let data: DatasetF64 = generate_dataset(&cfg)?;
            write_dataset_csv(&data, &a.data)?;
            write_partition_csv(&data, &a.partition)?;
            Ok(())
        }
    }
}

fn read_spec(path: &Path) -> Result<ExperimentSpec, Failure> {
    let text = fs::read_to_string(path)?;
    ExperimentSpec::from_json(&text).map_err(|e| match e {
        CtfError::Json(j) => Failure::Core(CtfError::Parse {
            path: path.display().to_string(),
            line: j.line(),
            msg: j.to_string(),
        }),
        other => Failure::Core(other),
    })
}

fn read_pvalues(path: &Path) -> Result<Vec<f64>, Failure> {
    let parse = |line: usize, msg: String| {
        Failure::Core(CtfError::Parse {
            path: path.display().to_string(),
            line,
            msg,
        })
    };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse(0, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| parse(1, e.to_string()))?.clone();
    if headers.len() != 2 || &headers[0] != "cell_id" || &headers[1] != "pvalue" {
        return Err(parse(1, "expected header `cell_id,pvalue`".into()));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse(line, e.to_string()))?;
        let p: f64 = rec
            .get(1)
            .and_then(|s| s.parse().ok())
            .filter(|p: &f64| (0.0..=1.0).contains(p))
            .ok_or_else(|| parse(line, format!("bad p-value `{}`", rec.get(1).unwrap_or(""))))?;
        out.push(p);
    }
    Ok(out)
}
