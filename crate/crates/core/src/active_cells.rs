//! High-confidence upper bound on the number of active cells and the
//! intersection procedure that uses it.
//!
//! For a grid `t_1 < … < t_k` the counts `|D̂_t| = #{g : p_g ≤ t}` behave like
//! `(|G| − J)t + J` plus a Brownian-bridge fluctuation of scale
//! `√(|G| − J)`. Solving the deviation inequality for `√(|G| − J)` yields
//! `H_i(C)`, and `Ĵ_ε = ⌈|G| − max_i H_i(C_ε)⌉` with `C_ε = √(−2 t_k ln ε)`.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctf_parametric::{optimize_thresholds, run_parametric_test_with, TargetRule};
use crate::ctf_permutation::{
    choose_np_thresholds, run_nonparametric_test_with, threshold_ratio, PermutationPlan, ScoreKind,
};
use crate::discovery::{CtfThresholds, DiscoverySet};
use crate::dist_kernels::chi2_sf;
use crate::error::{CtfError, Result};
use crate::linear_scores::{cell_score, Dataset, Partition, Projections};
use crate::scalar::Real;

/// Default grid `{0.5, 0.6, 0.7, 0.8, 0.9}`.
pub const DEFAULT_GRID: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Width of the window below `t_0` inspected for implausibly many p-values.
const A3_WINDOW: f64 = 0.05;

/// `1 − F_{|g|}(T_g)`.
pub fn cell_pvalue<T: Real>(data: &Dataset<T>, g: usize) -> Result<T> {
    let score = cell_score(data, g)?;
    chi2_sf(score, dof(data.partition().cell(g).len())?)
}

/// Cell p-values from precomputed projections; `None` for singular cells.
pub fn cell_pvalues_with<T: Real>(
    proj: &Projections<T>,
    partition: &Partition,
) -> Result<Vec<Option<T>>> {
    (0..partition.n_cells())
        .map(|g| match proj.cell_score(g) {
            Ok(s) => chi2_sf(s, dof(partition.cell(g).len())?).map(Some),
            Err(_) => Ok(None),
        })
        .collect()
}

fn dof(size: usize) -> Result<u32> {
    u32::try_from(size).map_err(|_| CtfError::InvalidConfig("cell too large".into()))
}

/// `#{g : p_g ≤ t_i}` for each grid point.
pub fn dhat_counts<T: Real>(pvalues: &[T], grid: &[T]) -> Vec<usize> {
    let mut sorted: Vec<T> = pvalues.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite p-values"));
    grid.iter()
        .map(|&t| sorted.partition_point(|&p| p <= t))
        .collect()
}

/// Positive root `H_i(C)` of `(1 − t)H + (tZ + C)√H − (|G| − |D̂_t|) = 0`
/// in `√H`.
pub fn h_i<T: Real>(c: T, z: T, t_i: T, count_i: usize, n_cells: usize) -> Result<T> {
    if !(t_i >= T::zero() && t_i < T::one()) {
        return Err(CtfError::domain("h_i", "grid point must lie in [0, 1)"));
    }
    if count_i > n_cells {
        return Err(CtfError::domain("h_i", "count exceeds the number of cells"));
    }
    let one_m = T::one() - t_i;
    let b = t_i * z + c;
    let rest = T::from_count(n_cells - count_i);
    let disc = b * b + T::lit(4.0) * one_m * rest;
    // The two forms of the root are algebraically equal; the second avoids
    // cancellation when b ≫ 0.
    let root = if b > T::zero() {
        let denom = b + disc.sqrt();
        if denom > T::zero() {
            T::lit(2.0) * rest / denom
        } else {
            T::zero()
        }
    } else {
        (-b + disc.sqrt()) / (one_m + one_m)
    };
    Ok(root * root)
}

/// Record of one `Ĵ` computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ActiveCellEstimate<T> {
    pub grid: Vec<T>,
    pub counts: Vec<usize>,
    pub z_draw: T,
    pub c: T,
    pub epsilon: T,
    pub j_hat: usize,
    pub n_cells: usize,
    /// Set when the estimate fell back to `|G|`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
}

/// `Ĵ_ε` with the randomization draw `Z ~ N(0, 1)` taken from `seed`.
pub fn estimate_j<T: Real>(
    pvalues: &[T],
    grid: &[T],
    epsilon: T,
    seed: u64,
) -> Result<ActiveCellEstimate<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: f64 = StandardNormal.sample(&mut rng);
    estimate_j_with_z(pvalues, grid, epsilon, T::lit(z))
}

/// [`estimate_j`] with a caller-supplied `Z`.
pub fn estimate_j_with_z<T: Real>(
    pvalues: &[T],
    grid: &[T],
    epsilon: T,
    z: T,
) -> Result<ActiveCellEstimate<T>> {
    if !(epsilon > T::zero() && epsilon < T::one()) {
        return Err(CtfError::InvalidConfig(format!(
            "epsilon = {epsilon} must lie in (0, 1)"
        )));
    }
    if grid.is_empty()
        || !(grid[0] > T::zero())
        || !(grid[grid.len() - 1] < T::one())
        || grid.windows(2).any(|w| !(w[0] < w[1]))
    {
        return Err(CtfError::InvalidConfig(
            "grid must be strictly increasing inside (0, 1)".into(),
        ));
    }
    if let Some(p) = pvalues
        .iter()
        .find(|p| !(**p >= T::zero() && **p <= T::one()))
    {
        return Err(CtfError::InvalidConfig(format!(
            "p-value {p} outside [0, 1]"
        )));
    }
    let n_cells = pvalues.len();
    let counts = dhat_counts(pvalues, grid);
    let t_max = grid[grid.len() - 1];
    let c = (-T::lit(2.0) * t_max * epsilon.ln()).sqrt();

    let mut max_h = T::zero();
    for (&t, &count) in grid.iter().zip(&counts) {
        max_h = max_h.max(h_i(c, z, t, count, n_cells)?);
    }
    let g = T::from_count(n_cells);
    let slack = T::tolerance(1e-9) * g.max(T::one());
    let raw = (g - max_h - slack).ceil().max(T::zero()).min(g);
    let mut j_hat = raw.to_usize().unwrap_or(n_cells);

    let mut fallback = None;
    let t0 = grid[0];
    let width = T::lit(A3_WINDOW).min(t0);
    let near = pvalues
        .iter()
        .filter(|&&p| p > t0 - width && p < t0)
        .count();
    let expect = g * width;
    let limit = expect + T::lit(3.0) * (expect * (T::one() - width)).sqrt();
    if T::from_count(near) > limit {
        let msg = format!(
            "{near} cell p-values fall just below t0 = {t0} (expected at most {limit:.1}); \
             active cells may not be fully separated, using J = |G|"
        );
        warn!("{msg}");
        fallback = Some(msg);
        j_hat = n_cells;
    }

    Ok(ActiveCellEstimate {
        grid: grid.to_vec(),
        counts,
        z_draw: z,
        c,
        epsilon,
        j_hat,
        n_cells,
        fallback,
    })
}

/// Regime-specific inputs for [`adjusted_discovery`].
#[derive(Debug, Clone)]
pub enum AdjustRegime {
    Parametric {
        target: TargetRule,
    },
    Nonparametric {
        target: TargetRule,
        plan: PermutationPlan,
        kind: ScoreKind,
    },
}

#[derive(Debug, Clone)]
pub struct AdjustConfig<T> {
    pub grid: Vec<T>,
    pub seed: u64,
    pub regime: AdjustRegime,
}

/// Outcome for one candidate bound `J′`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct JRun<T> {
    pub j_bound: usize,
    pub thresholds: Option<CtfThresholds<T>>,
    pub detected: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub infeasible: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct AdjustedDiscovery<T> {
    pub estimate: ActiveCellEstimate<T>,
    pub runs: Vec<JRun<T>>,
    /// Indices detected under every `J′ ∈ 1..=max(Ĵ, 1)`.
    pub detected: Vec<usize>,
    /// Nominal FWER level `α + ε`.
    pub level: T,
}

/// Runs the regime's procedure for every `J′ ≤ Ĵ` and intersects the
/// discovery sets. `Ĵ = 0` is treated as `J′ = 1`.
///
/// A `J′` with infeasible thresholds contributes an empty set, which
/// empties the intersection.
pub fn adjusted_discovery<T: Real>(
    data: &Dataset<T>,
    alpha: T,
    epsilon: T,
    config: &AdjustConfig<T>,
) -> Result<AdjustedDiscovery<T>> {
    let partition = data.partition();
    let nu_g = partition.nu_g_max();
    if partition.cells().iter().any(|c| c.len() != nu_g) {
        return Err(CtfError::InvalidConfig(
            "adjusted discovery needs cells of equal size".into(),
        ));
    }
    let nu_g32 = dof(nu_g)?;
    let proj = Projections::new(data);
    let pvalues: Vec<T> = cell_pvalues_with(&proj, partition)?
        .into_iter()
        .map(|p| p.unwrap_or_else(T::one))
        .collect();
    let estimate = estimate_j(&pvalues, &config.grid, epsilon, config.seed)?;
    let j_max = estimate.j_hat.max(1);
    let n = data.n_samples();
    let n_vars = data.n_vars();

    let runs: Vec<JRun<T>> = (1..=j_max)
        .into_par_iter()
        .map(|j| -> Result<JRun<T>> {
            let outcome: Result<DiscoverySet<T>> = (|| match &config.regime {
                AdjustRegime::Parametric { target } => {
                    let t = target.target(n, nu_g32, j)?;
                    let opt = optimize_thresholds(alpha, n_vars, nu_g32, &t)?;
                    run_parametric_test_with(&proj, partition, &opt.thresholds)
                }
                AdjustRegime::Nonparametric { target, plan, kind } => {
                    let t = target.target(n, nu_g32, j)?;
                    let opt = optimize_thresholds(alpha, n_vars, nu_g32, &t)?;
                    let ratio =
                        threshold_ratio(opt.thresholds.theta_g, opt.thresholds.theta_v, nu_g32)?;
                    let th = choose_np_thresholds(alpha, n_vars, nu_g, j, plan.k, ratio)?;
                    run_nonparametric_test_with(&proj, partition, *kind, plan, &th)
                }
            })();
            match outcome {
                Ok(set) => Ok(JRun {
                    j_bound: j,
                    thresholds: Some(set.thresholds),
                    detected: set.detected,
                    infeasible: None,
                }),
                Err(e) if e.is_infeasible() => {
                    warn!("J' = {j}: {e}; contributing an empty set");
                    Ok(JRun {
                        j_bound: j,
                        thresholds: None,
                        detected: Vec::new(),
                        infeasible: Some(e.to_string()),
                    })
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;

    let mut detected = runs[0].detected.clone();
    for run in &runs[1..] {
        detected.retain(|v| run.detected.binary_search(v).is_ok());
    }
    Ok(AdjustedDiscovery {
        estimate,
        runs,
        detected,
        level: alpha + epsilon,
    })
}
