//! Simulation experiments: detection power and empirical FWER of the
//! coarse-to-fine procedures against Holm.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::active_cells::{adjusted_discovery, AdjustConfig, AdjustRegime, DEFAULT_GRID};
use crate::baselines::{holm_reject, parametric_pvalues, PValueVector};
use crate::ctf_parametric::{optimize_thresholds, run_parametric_test_with, TargetRule};
use crate::ctf_permutation::{
    choose_np_thresholds, choose_np_thresholds_asymptotic, marginal_pvalues,
    run_nonparametric_test_with, sample_permutations, threshold_ratio, ScoreKind,
};
use crate::discovery::CtfThresholds;
use crate::error::{CtfError, Result};
use crate::linear_scores::{generate_dataset, Dataset, Projections, SimConfig};
use crate::rng::derive_seed;
use crate::FORMAT_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegimeChoice {
    Parametric,
    Nonparametric,
    Both,
}

impl RegimeChoice {
    fn parametric(self) -> bool {
        matches!(self, RegimeChoice::Parametric | RegimeChoice::Both)
    }

    fn nonparametric(self) -> bool {
        matches!(self, RegimeChoice::Nonparametric | RegimeChoice::Both)
    }
}

/// Which bound calibrates the non-parametric thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NpBound {
    /// Finite-`K` bound with concentration terms.
    #[default]
    Finite,
    /// Idealized `K → ∞` bound.
    Asymptotic,
}

fn default_true() -> bool {
    true
}

fn default_version() -> u32 {
    FORMAT_VERSION
}

/// Experiment description, read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default = "default_version")]
    pub format_version: u32,
    pub sim: SimConfig,
    pub alpha: f64,
    /// When set, CTF uses the estimated bound `Ĵ` and the intersection set.
    #[serde(default)]
    pub epsilon: Option<f64>,
    pub regime: RegimeChoice,
    #[serde(default)]
    pub k_perms: Option<usize>,
    pub replicates: usize,
    /// Actives per cell for each x-axis point; `sim.n_active` stays fixed.
    #[serde(default)]
    pub sweep: Vec<usize>,
    pub seed: u64,
    #[serde(default)]
    pub target: TargetRule,
    /// Bound on the number of active cells; defaults to the true count.
    #[serde(default)]
    pub j_bound: Option<usize>,
    #[serde(default)]
    pub score: ScoreKind,
    /// Use the model variance of `y` instead of the sample variance.
    #[serde(default = "default_true")]
    pub known_sigma: bool,
    #[serde(default)]
    pub np_bound: NpBound,
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CtfError::InvalidConfig(m));
        if self.format_version != FORMAT_VERSION {
            return bad(format!(
                "unsupported format_version {}",
                self.format_version
            ));
        }
        if self.replicates == 0 {
            return bad("replicates must be >= 1".into());
        }
        if self.sweep.contains(&0) {
            return bad("sweep values must be >= 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha = {} must lie in (0, 1]", self.alpha));
        }
        if let Some(e) = self.epsilon {
            if !(e > 0.0 && e < 1.0) {
                return bad(format!("epsilon = {e} must lie in (0, 1)"));
            }
        }
        if self.regime.nonparametric() && self.k_perms.is_none_or(|k| k < 3) {
            return bad("nonparametric runs need k_perms >= 3".into());
        }
        if self.j_bound == Some(0) {
            return bad("j_bound must be >= 1".into());
        }
        self.sim.validate()
    }

    fn sweep_configs(&self) -> Result<Vec<(usize, SimConfig)>> {
        if self.sweep.is_empty() {
            return Ok(vec![(self.sim.actives_per_cell, self.sim.clone())]);
        }
        self.sweep
            .iter()
            .map(|&s| {
                let cfg = SimConfig {
                    actives_per_cell: s,
                    ..self.sim.clone()
                };
                cfg.validate()?;
                Ok((s, cfg))
            })
            .collect()
    }
}

pub const METHOD_CTF_PAR: &str = "ctf_parametric";
pub const METHOD_HOLM_PAR: &str = "holm_parametric";
pub const METHOD_CTF_NP: &str = "ctf_nonparametric";
pub const METHOD_HOLM_NP: &str = "holm_nonparametric";

/// Detection rate or FWER with its 95% normal-approximation half width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub sweep: usize,
    pub method: String,
    pub rate: f64,
    pub ci_half_width: f64,
    pub trials: usize,
}

impl RateRow {
    fn new(sweep: usize, method: &str, successes: usize, trials: usize) -> Self {
        let rate = if trials == 0 {
            0.0
        } else {
            successes as f64 / trials as f64
        };
        let ci = if trials == 0 {
            0.0
        } else {
            1.96 * (rate * (1.0 - rate) / trials as f64).sqrt()
        };
        Self {
            sweep,
            method: method.to_string(),
            rate,
            ci_half_width: ci,
            trials,
        }
    }
}

/// Per-index detection rates and per-replicate FWER.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerTable {
    pub format_version: u32,
    pub rows: Vec<RateRow>,
    pub fwer_rows: Vec<RateRow>,
}

impl PowerTable {
    /// Fixed-column CSV: `kind,sweep,method,rate,ci_half_width,trials`
    /// after a `#` comment line carrying the format version.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# ctf power table format_version={}\n", self.format_version);
        out.push_str("kind,sweep,method,rate,ci_half_width,trials\n");
        for (kind, rows) in [("power", &self.rows), ("fwer", &self.fwer_rows)] {
            for r in rows {
                let _ = writeln!(
                    out,
                    "{kind},{},{},{:.6},{:.6},{}",
                    r.sweep, r.method, r.rate, r.ci_half_width, r.trials
                );
            }
        }
        out
    }

    pub fn power(&self, sweep: usize, method: &str) -> Option<&RateRow> {
        self.rows
            .iter()
            .find(|r| r.sweep == sweep && r.method == method)
    }

    pub fn fwer(&self, sweep: usize, method: &str) -> Option<&RateRow> {
        self.fwer_rows
            .iter()
            .find(|r| r.sweep == sweep && r.method == method)
    }
}

/// Thresholds shared by every replicate of one sweep point.
#[derive(Debug, Clone)]
struct Plan {
    sweep_index: usize,
    sweep: usize,
    cfg: SimConfig,
    j_bound: usize,
    parametric: Option<CtfThresholds<f64>>,
    nonparametric: Option<CtfThresholds<f64>>,
}

#[derive(Debug, Clone, Default)]
struct Tally {
    /// `(method, true positives, any false positive)`.
    entries: Vec<(&'static str, usize, bool)>,
}

fn cell_size_u32(cfg: &SimConfig) -> Result<u32> {
    u32::try_from(cfg.cell_size).map_err(|_| CtfError::InvalidConfig("cell size too large".into()))
}

fn make_plan(
    spec: &ExperimentSpec,
    sweep_index: usize,
    sweep: usize,
    cfg: SimConfig,
) -> Result<Plan> {
    let true_j = cfg.n_active_cells();
    let j_bound = spec.j_bound.unwrap_or(true_j.max(1));
    let nu = cell_size_u32(&cfg)?;
    let trivial = spec.alpha >= 1.0;

    let par_opt = if trivial {
        None
    } else {
        let target = spec.target.target::<f64>(cfg.n_samples, nu, j_bound)?;
        Some(optimize_thresholds(spec.alpha, cfg.n_vars, nu, &target)?)
    };
    let parametric = if spec.regime.parametric() {
        Some(match par_opt {
            Some(o) => o.thresholds,
            None => CtfThresholds::parametric(0.0, 0.0)?,
        })
    } else {
        None
    };
    let nonparametric = if spec.regime.nonparametric() {
        Some(match par_opt {
            None => CtfThresholds::nonparametric(1.0, 1.0, 1.0, 0.0)?,
            Some(o) => {
                let ratio = threshold_ratio(o.thresholds.theta_g, o.thresholds.theta_v, nu)?;
                let k = spec.k_perms.expect("validated");
                match spec.np_bound {
                    NpBound::Finite => choose_np_thresholds(
                        spec.alpha,
                        cfg.n_vars,
                        cfg.cell_size,
                        j_bound,
                        k,
                        ratio,
                    )?,
                    NpBound::Asymptotic => choose_np_thresholds_asymptotic(
                        spec.alpha,
                        cfg.n_vars,
                        cfg.cell_size,
                        j_bound,
                        ratio,
                    )?,
                }
            }
        })
    } else {
        None
    };
    Ok(Plan {
        sweep_index,
        sweep,
        cfg,
        j_bound,
        parametric,
        nonparametric,
    })
}

fn score(detected: &[usize], data: &Dataset<f64>) -> (usize, bool) {
    let active = data.true_active().unwrap_or(&[]);
    let tp = detected
        .iter()
        .filter(|v| active.binary_search(v).is_ok())
        .count();
    (tp, tp < detected.len())
}

const STREAM_DATA: u64 = 0;
const STREAM_PLAN: u64 = 1;
const STREAM_JHAT: u64 = 2;

fn run_replicate(spec: &ExperimentSpec, plan: &Plan, rep: usize) -> Result<Tally> {
    let path = |stream: u64| derive_seed(spec.seed, &[plan.sweep_index as u64, rep as u64, stream]);
    let cfg = SimConfig {
        seed: path(STREAM_DATA),
        ..plan.cfg.clone()
    };
    let mut data: Dataset<f64> = generate_dataset(&cfg)?;
    if spec.known_sigma {
        data = data.with_sigma_y_sq(cfg.sigma_y_sq())?;
    }
    let proj = Projections::new(&data);
    let partition = data.partition();
    let alpha_holm = spec.alpha.min(1.0);
    let mut tally = Tally::default();

    if let Some(th) = plan.parametric {
        let detected = match spec.epsilon {
            None => run_parametric_test_with(&proj, partition, &th)?.detected,
            Some(eps) => {
                let config = AdjustConfig {
                    grid: DEFAULT_GRID.to_vec(),
                    seed: path(STREAM_JHAT),
                    regime: AdjustRegime::Parametric {
                        target: spec.target,
                    },
                };
                adjusted_discovery(&data, spec.alpha, eps, &config)?.detected
            }
        };
        let (tp, fp) = score(&detected, &data);
        tally.entries.push((METHOD_CTF_PAR, tp, fp));
        let p = PValueVector::from_options(parametric_pvalues(&proj)?)?;
        let (tp, fp) = score(&holm_reject(&p, alpha_holm)?, &data);
        tally.entries.push((METHOD_HOLM_PAR, tp, fp));
    }

    if let Some(th) = plan.nonparametric {
        let k = spec.k_perms.expect("validated");
        let perm = sample_permutations(cfg.n_samples, k, path(STREAM_PLAN))?;
        let detected = match spec.epsilon {
            None => run_nonparametric_test_with(&proj, partition, spec.score, &perm, &th)?.detected,
            Some(eps) => {
                let config = AdjustConfig {
                    grid: DEFAULT_GRID.to_vec(),
                    seed: path(STREAM_JHAT),
                    regime: AdjustRegime::Nonparametric {
                        target: spec.target,
                        plan: perm.clone(),
                        kind: spec.score,
                    },
                };
                adjusted_discovery(&data, spec.alpha, eps, &config)?.detected
            }
        };
        let (tp, fp) = score(&detected, &data);
        tally.entries.push((METHOD_CTF_NP, tp, fp));
        let p = PValueVector::from_options(marginal_pvalues(&proj, &perm, spec.score)?)?;
        let (tp, fp) = score(&holm_reject(&p, alpha_holm)?, &data);
        tally.entries.push((METHOD_HOLM_NP, tp, fp));
    }
    Ok(tally)
}

fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match threads {
        None => Ok(f()),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t.max(1))
                .build()
                .map_err(|e| CtfError::InvalidConfig(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn execute(spec: &ExperimentSpec, plans: &[Plan], threads: Option<usize>) -> Result<PowerTable> {
    let tallies: Vec<Vec<Tally>> = with_threads(threads, || {
        plans
            .iter()
            .map(|plan| {
                (0..spec.replicates)
                    .into_par_iter()
                    .map(|rep| {
                        run_replicate(spec, plan, rep).map_err(|e| CtfError::Replicate {
                            index: rep,
                            source: Box::new(e),
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let mut rows = Vec::new();
    let mut fwer_rows = Vec::new();
    for (plan, reps) in plans.iter().zip(&tallies) {
        let methods: Vec<&str> = reps
            .first()
            .map(|t| t.entries.iter().map(|e| e.0).collect())
            .unwrap_or_default();
        for (m_idx, method) in methods.iter().enumerate() {
            let tp: usize = reps.iter().map(|t| t.entries[m_idx].1).sum();
            let fp: usize = reps.iter().filter(|t| t.entries[m_idx].2).count();
            if plan.cfg.n_active > 0 {
                rows.push(RateRow::new(
                    plan.sweep,
                    method,
                    tp,
                    reps.len() * plan.cfg.n_active,
                ));
            }
            fwer_rows.push(RateRow::new(plan.sweep, method, fp, reps.len()));
        }
    }
    Ok(PowerTable {
        format_version: FORMAT_VERSION,
        rows,
        fwer_rows,
    })
}

/// Runs every sweep point and replicate. Deterministic in `spec.seed`
/// regardless of `threads`.
pub fn run_power_experiment(spec: &ExperimentSpec, threads: Option<usize>) -> Result<PowerTable> {
    spec.validate()?;
    let plans = spec
        .sweep_configs()?
        .into_iter()
        .enumerate()
        .map(|(i, (s, cfg))| make_plan(spec, i, s, cfg))
        .collect::<Result<Vec<_>>>()?;
    execute(spec, &plans, threads)
}

/// Global-null run (`n_active` forced to 0, sweep ignored). The bound on
/// active cells is `spec.j_bound`, defaulting to 1.
pub fn run_null_fwer_experiment(
    spec: &ExperimentSpec,
    threads: Option<usize>,
) -> Result<PowerTable> {
    spec.validate()?;
    let cfg = SimConfig {
        n_active: 0,
        ..spec.sim.clone()
    };
    let null_spec = ExperimentSpec {
        j_bound: Some(spec.j_bound.unwrap_or(1)),
        sweep: Vec::new(),
        sim: cfg.clone(),
        ..spec.clone()
    };
    let plan = make_plan(&null_spec, 0, 0, cfg)?;
    execute(&null_spec, &[plan], threads)
}

/// Thresholds the experiment would use at each sweep point, for reporting.
pub fn experiment_thresholds(spec: &ExperimentSpec) -> Result<Vec<SweepThresholds>> {
    spec.validate()?;
    spec.sweep_configs()?
        .into_iter()
        .enumerate()
        .map(|(i, (s, cfg))| {
            let p = make_plan(spec, i, s, cfg)?;
            Ok(SweepThresholds {
                sweep: p.sweep,
                j_bound: p.j_bound,
                parametric: p.parametric,
                nonparametric: p.nonparametric,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepThresholds {
    pub sweep: usize,
    pub j_bound: usize,
    pub parametric: Option<CtfThresholds<f64>>,
    pub nonparametric: Option<CtfThresholds<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentSpec {
        ExperimentSpec {
            format_version: 1,
            sim: SimConfig {
                n_vars: 60,
                cell_size: 6,
                n_samples: 80,
                n_active: 4,
                actives_per_cell: 2,
                coef: 1.0,
                var_x: 1.0,
                var_noise: 2.0,
                seed: 0,
            },
            alpha: 0.05,
            epsilon: None,
            regime: RegimeChoice::Parametric,
            k_perms: None,
            replicates: 3,
            sweep: vec![1, 2],
            seed: 5,
            target: TargetRule::Default,
            j_bound: None,
            score: ScoreKind::Rss,
            known_sigma: true,
            np_bound: NpBound::Finite,
        }
    }

    #[test]
    fn csv_shape() {
        let t = run_power_experiment(&tiny(), Some(1)).unwrap();
        let csv = t.to_csv();
        let mut lines = csv.lines();
        assert!(lines.next().unwrap().starts_with("# "));
        assert_eq!(
            lines.next().unwrap(),
            "kind,sweep,method,rate,ci_half_width,trials"
        );
        assert_eq!(t.rows.len(), 4);
        assert_eq!(t.fwer_rows.len(), 4);
    }

    #[test]
    fn spec_validation() {
        let mut s = tiny();
        s.replicates = 0;
        assert!(s.validate().is_err());
        let mut s = tiny();
        s.regime = RegimeChoice::Nonparametric;
        assert!(s.validate().is_err());
    }
}
