//! Non-parametric coarse-to-fine test built on sampled permutations of the
//! response.
//!
//! A group element `ξ` acts on the data by permuting the response only,
//! `(ξ•u)_k = (y_{ξ(k)}, x_k)`, so cell scores depend on `(y, X_g)` alone.

use std::collections::BTreeMap;
use std::ops::Range;

use log::warn;
use ndarray::{s, Array1, Array2, ArrayView1, Axis, ShapeBuilder};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discovery::{CtfThresholds, DiscoverySet, IndexStats, Regime, SkippedCell};
use crate::error::{CtfError, Result};
use crate::linear_scores::{Dataset, Partition, Projections};
use crate::scalar::Real;

/// Relative slack used when comparing a permuted score with the observed
/// one. Near-ties are counted as "at least as extreme", which can only make
/// a statistic larger.
const TIE_RTOL: f64 = 1e-12;

/// Target width, in basis columns, of one block product.
const BLOCK_COLS: usize = 512;

/// `K` permutations of `0..n` and the seed that produced them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationPlan {
    pub k: usize,
    pub n: usize,
    pub seed: Option<u64>,
    pub elements: Vec<Vec<u32>>,
}

impl PermutationPlan {
    /// `K` independent uniform permutations (Fisher–Yates), reproducible
    /// from `(n, k, seed)`.
    pub fn sample(n: usize, k: usize, seed: u64) -> Result<Self> {
        if n < 2 || k < 2 {
            return Err(CtfError::InvalidConfig(format!(
                "need n >= 2 and k >= 2, got n = {n}, k = {k}"
            )));
        }
        let n32 = u32::try_from(n).map_err(|_| CtfError::InvalidConfig("n too large".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let elements = (0..k)
            .map(|_| {
                let mut p: Vec<u32> = (0..n32).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect();
        Ok(Self {
            k,
            n,
            seed: Some(seed),
            elements,
        })
    }

    /// Every permutation of `0..n` in lexicographic order.
    pub fn exhaustive(n: usize) -> Result<Self> {
        if !(2..=9).contains(&n) {
            return Err(CtfError::InvalidConfig(format!(
                "exhaustive plans are limited to 2 <= n <= 9, got {n}"
            )));
        }
        let mut current: Vec<u32> = (0..n as u32).collect();
        let mut elements = vec![current.clone()];
        while let Some(i) = (0..n - 1).rev().find(|&i| current[i] < current[i + 1]) {
            let j = (i + 1..n)
                .rev()
                .find(|&j| current[j] > current[i])
                .expect("successor");
            current.swap(i, j);
            current[i + 1..].reverse();
            elements.push(current.clone());
        }
        Ok(Self {
            k: elements.len(),
            n,
            seed: None,
            elements,
        })
    }

    /// Validates that every element is a bijection of `0..n`.
    pub fn from_elements(n: usize, elements: Vec<Vec<u32>>) -> Result<Self> {
        if elements.len() < 2 {
            return Err(CtfError::InvalidConfig(
                "a plan needs at least 2 elements".into(),
            ));
        }
        for (i, e) in elements.iter().enumerate() {
            let mut seen = vec![false; n];
            if e.len() != n
                || !e
                    .iter()
                    .all(|&x| (x as usize) < n && !std::mem::replace(&mut seen[x as usize], true))
            {
                return Err(CtfError::InvalidConfig(format!(
                    "element {i} is not a permutation of 0..{n}"
                )));
            }
        }
        Ok(Self {
            k: elements.len(),
            n,
            seed: None,
            elements,
        })
    }
}

/// Deterministic draw of `K` permutations.
pub fn sample_permutations(n: usize, k: usize, seed: u64) -> Result<PermutationPlan> {
    PermutationPlan::sample(n, k, seed)
}

/// Score family. Both are functions of `(y, X_g)` and rank identically
/// under permutations of `y`; they differ only by the scale factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Normalized excess regression sum of squares.
    #[default]
    Rss,
    /// Squared (multiple) correlation with the response.
    SquaredCorrelation,
}

impl std::str::FromStr for ScoreKind {
    type Err = CtfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rss" => Ok(ScoreKind::Rss),
            "squared_correlation" | "corr2" => Ok(ScoreKind::SquaredCorrelation),
            other => Err(CtfError::InvalidConfig(format!("unknown score `{other}`"))),
        }
    }
}

/// Observed score and its values under each plan element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct EntityScores<T> {
    pub base: T,
    pub perms: Vec<T>,
}

/// Scores of cells and (a subset of) variables under a plan. `None`
/// entries were not scored or are singular.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPermutations<T> {
    pub cells: Vec<Option<EntityScores<T>>>,
    pub variables: Vec<Option<EntityScores<T>>>,
}

/// Response matrix: column 0 is the centered response, column `k + 1` its
/// image under plan element `k`.
fn response_matrix<T: Real>(yc: ArrayView1<'_, T>, plan: &PermutationPlan) -> Array2<T> {
    let n = yc.len();
    let mut m = Array2::<T>::zeros((n, plan.k + 1).f());
    m.column_mut(0).assign(&yc);
    for (k, e) in plan.elements.iter().enumerate() {
        let mut col = m.column_mut(k + 1);
        for (i, &src) in e.iter().enumerate() {
            col[i] = yc[src as usize];
        }
    }
    m
}

struct Scorer<'a, T> {
    proj: &'a Projections<T>,
    responses: Array2<T>,
    scale: T,
}

impl<'a, T: Real> Scorer<'a, T> {
    fn new(proj: &'a Projections<T>, plan: &PermutationPlan, kind: ScoreKind) -> Result<Self> {
        let yc = proj.y_centered();
        if plan.n != yc.len() {
            return Err(CtfError::InvalidConfig(format!(
                "plan permutes {} samples but the data has {}",
                plan.n,
                yc.len()
            )));
        }
        let ss: T = yc.iter().map(|&v| v * v).sum();
        let scale = match kind {
            ScoreKind::Rss => T::one() / proj.sigma_y_sq(),
            ScoreKind::SquaredCorrelation if ss > T::zero() => T::one() / ss,
            ScoreKind::SquaredCorrelation => T::zero(),
        };
        Ok(Self {
            proj,
            responses: response_matrix(yc, plan),
            scale,
        })
    }

    fn split(&self, sq: Array1<T>) -> EntityScores<T> {
        let mut all = sq.into_iter().map(|s| s * self.scale);
        let base = all.next().expect("base column");
        EntityScores {
            base,
            perms: all.collect(),
        }
    }

    /// Scores of every cell. Cell bases are processed in column blocks of
    /// [`BLOCK_COLS`] so that the work is a handful of large products.
    fn cells(&self) -> Vec<Option<EntityScores<T>>> {
        let n_cells = self.proj.n_cells();
        let mut blocks: Vec<(usize, usize)> = Vec::new();
        let mut first = 0;
        let mut width = 0;
        for g in 0..n_cells {
            width += self.proj.cell_columns(g).map_or(0, |r| r.len());
            if width >= BLOCK_COLS || g + 1 == n_cells {
                blocks.push((first, g + 1));
                first = g + 1;
                width = 0;
            }
        }
        let stack = self.proj.basis_stack();
        let per_block: Vec<Vec<Option<EntityScores<T>>>> = blocks
            .into_par_iter()
            .map(|(a, b)| {
                let cols: Vec<Range<usize>> =
                    (a..b).filter_map(|g| self.proj.cell_columns(g)).collect();
                let (lo, hi) = match (cols.first(), cols.last()) {
                    (Some(f), Some(l)) => (f.start, l.end),
                    _ => (0, 0),
                };
                let coords = stack.slice(s![.., lo..hi]).t().dot(&self.responses);
                (a..b)
                    .map(|g| {
                        let r = self.proj.cell_columns(g)?;
                        let rows = coords.slice(s![r.start - lo..r.end - lo, ..]);
                        let sq = rows.map_axis(Axis(0), |c| c.iter().map(|&v| v * v).sum::<T>());
                        Some(self.split(sq))
                    })
                    .collect()
            })
            .collect();
        per_block.into_iter().flatten().collect()
    }

    fn variable(&self, v: usize) -> Option<EntityScores<T>> {
        if !self.proj.variable_ok(v) {
            return None;
        }
        let s = self.proj.var_directions().column(v).dot(&self.responses);
        Some(self.split(s.mapv(|e| e * e)))
    }
}

/// Scores every cell and the requested variables (all when `variables` is
/// `None`) under `plan`.
pub fn score_permutations<T: Real>(
    proj: &Projections<T>,
    plan: &PermutationPlan,
    kind: ScoreKind,
    variables: Option<&[usize]>,
) -> Result<ScoredPermutations<T>> {
    let scorer = Scorer::new(proj, plan, kind)?;
    let n_vars = proj.var_directions().ncols();
    let cells = scorer.cells();
    let mut vars: Vec<Option<EntityScores<T>>> = vec![None; n_vars];
    let wanted: Vec<usize> = variables.map_or_else(|| (0..n_vars).collect(), <[usize]>::to_vec);
    let scored: Vec<(usize, Option<EntityScores<T>>)> = wanted
        .into_par_iter()
        .map(|v| (v, scorer.variable(v)))
        .collect();
    for (v, s) in scored {
        vars[v] = s;
    }
    Ok(ScoredPermutations {
        cells,
        variables: vars,
    })
}

fn at_least<T: Real>(perm: T, base: T) -> bool {
    perm >= base - T::tolerance(TIE_RTOL) * base.abs()
}

/// Fraction of plan elements whose score is at least the observed one.
pub fn hat_t<T: Real>(scores: &EntityScores<T>) -> T {
    let hits = scores
        .perms
        .iter()
        .filter(|&&p| at_least(p, scores.base))
        .count();
    T::from_count(hits) / T::from_count(scores.perms.len())
}

/// `K·T̂_g(ξ_j•u)` for each plan element `j`: the number of pooled sampled
/// scores at least `ρ_g(ξ_j•u)`, counting `j` itself.
pub fn pooled_rank_counts<T: Real>(cell: &EntityScores<T>) -> Vec<usize> {
    let k = cell.perms.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        cell.perms[b]
            .partial_cmp(&cell.perms[a])
            .expect("finite scores")
    });
    let mut counts = vec![0usize; k];
    let mut i = 0;
    while i < k {
        let mut j = i;
        while j + 1 < k && cell.perms[order[j + 1]] == cell.perms[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            counts[idx] = j + 1;
        }
        i = j + 1;
    }
    counts
}

/// `N̂_g = μ̂(ξ': T̂_g(ξ'•u) ≤ θ_G + ε_G)`.
pub fn hat_n<T: Real>(cell: &EntityScores<T>, theta_g: T, epsilon_g: T) -> T {
    let k = T::from_count(cell.perms.len());
    let limit = theta_g + epsilon_g;
    let hits = pooled_rank_counts(cell)
        .into_iter()
        .filter(|&c| T::from_count(c) / k <= limit)
        .count();
    T::from_count(hits) / k
}

/// Conditional index statistic
/// `μ̂(ξ': ρ_v(u) ≤ ρ_v(ξ'•u), T̂_g(ξ'•u) ≤ θ_G + 2ε_G) / N̂_g`.
pub fn hat_t_conditional<T: Real>(
    variable: &EntityScores<T>,
    cell: &EntityScores<T>,
    cell_index: usize,
    theta_g: T,
    epsilon_g: T,
) -> Result<T> {
    let counts = pooled_rank_counts(cell);
    conditional_from_counts(variable, &counts, cell_index, theta_g, epsilon_g)
}

fn conditional_from_counts<T: Real>(
    variable: &EntityScores<T>,
    counts: &[usize],
    cell_index: usize,
    theta_g: T,
    epsilon_g: T,
) -> Result<T> {
    let k = counts.len();
    if variable.perms.len() != k {
        return Err(CtfError::InvalidConfig(
            "variable and cell scored under different plans".into(),
        ));
    }
    let kt = T::from_count(k);
    let outer = theta_g + epsilon_g;
    let inner = outer + epsilon_g;
    let denom = counts
        .iter()
        .filter(|&&c| T::from_count(c) / kt <= outer)
        .count();
    if denom == 0 {
        return Err(CtfError::EmptyConditioning { cell: cell_index });
    }
    let numer = counts
        .iter()
        .zip(&variable.perms)
        .filter(|&(&c, &p)| T::from_count(c) / kt <= inner && at_least(p, variable.base))
        .count();
    Ok(T::from_count(numer) / T::from_count(denom))
}

/// `exp(−2Kε²) + K·exp(−2(K−1)(ε − 1/(K−1))²)`, the two concentration terms.
fn hoeffding_terms<T: Real>(k: usize, epsilon_g: T) -> T {
    let kt = T::from_count(k);
    let km1 = T::from_count(k - 1);
    let shift = epsilon_g - T::one() / km1;
    let two = T::lit(2.0);
    (-two * kt * epsilon_g * epsilon_g).exp() + kt * (-two * km1 * shift * shift).exp()
}

/// Finite-sample FWER bound for the randomized test:
///
/// `|V|(e^{−2Kε²} + K e^{−2(K−1)(ε−1/(K−1))²} + (K(θ_G+ε)θ_V + 1)/(K+1)) + J ν_G θ_V′`.
#[allow(clippy::too_many_arguments)]
pub fn np_fwer_bound<T: Real>(
    n_vars: usize,
    nu_g: usize,
    j_bound: usize,
    k: usize,
    theta_g: T,
    epsilon_g: T,
    theta_v: T,
    theta_v_prime: T,
) -> Result<T> {
    if k < 3 {
        return Err(CtfError::domain("np_fwer_bound", "K must be at least 3"));
    }
    if !(epsilon_g > T::one() / T::from_count(k - 1)) {
        return Err(CtfError::domain(
            "np_fwer_bound",
            "epsilon_g must exceed 1/(K-1)",
        ));
    }
    for t in [theta_g, theta_v, theta_v_prime] {
        if !(t >= T::zero() && t <= T::one()) {
            return Err(CtfError::domain(
                "np_fwer_bound",
                "thresholds must lie in [0, 1]",
            ));
        }
    }
    let kt = T::from_count(k);
    let screen = (kt * (theta_g + epsilon_g) * theta_v + T::one()) / (kt + T::one());
    Ok(
        T::from_count(n_vars) * (hoeffding_terms(k, epsilon_g) + screen)
            + T::from_count(j_bound * nu_g) * theta_v_prime,
    )
}

/// Idealized (`K → ∞`) bound `|V| θ_G θ_V + J ν_G θ_V′`.
pub fn np_fwer_bound_asymptotic<T: Real>(
    n_vars: usize,
    nu_g: usize,
    j_bound: usize,
    theta_g: T,
    theta_v: T,
    theta_v_prime: T,
) -> T {
    T::from_count(n_vars) * theta_g * theta_v + T::from_count(j_bound * nu_g) * theta_v_prime
}

/// Smallest `ε_G ≥ 2/(K−1)` whose concentration terms fit in `budget`.
fn solve_epsilon<T: Real>(k: usize, budget: T) -> Option<T> {
    let floor = T::lit(2.0) / T::from_count(k - 1);
    if hoeffding_terms(k, floor) <= budget {
        return Some(floor);
    }
    let mut hi = floor;
    while hoeffding_terms(k, hi) > budget {
        hi = hi + hi;
        if hi >= T::one() {
            if hoeffding_terms(k, T::one()) > budget {
                return None;
            }
            hi = T::one();
            break;
        }
    }
    let mut lo = floor;
    for _ in 0..200 {
        let mid = (lo + hi) * T::lit(0.5);
        if mid <= lo || mid >= hi {
            break;
        }
        if hoeffding_terms(k, mid) <= budget {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

/// Thresholds meeting [`np_fwer_bound`] `= α` with `θ_V = ratio·θ_G`.
///
/// Half of `α` goes to the `J ν_G θ_V′` term. Of the per-index remainder
/// `b = α/(2|V|)`, the concentration terms receive at most `b/2` (via the
/// smallest admissible `ε_G`) and the screening term takes the rest, which
/// fixes `θ_G` as the positive root of a quadratic.
pub fn choose_np_thresholds<T: Real>(
    alpha: T,
    n_vars: usize,
    nu_g: usize,
    j_bound: usize,
    k: usize,
    ratio: T,
) -> Result<CtfThresholds<T>> {
    check_np_inputs(alpha, n_vars, nu_g, j_bound, ratio)?;
    if k < 3 {
        return Err(CtfError::InvalidConfig("K must be at least 3".into()));
    }
    let half = alpha * T::lit(0.5);
    let theta_v_prime = half / T::from_count(j_bound * nu_g);
    let b = half / T::from_count(n_vars);
    let eps = solve_epsilon(k, b * T::lit(0.5)).ok_or_else(|| {
        CtfError::Infeasible(format!("K = {k} too small for concentration budget {b}"))
    })?;
    let rest = b - hoeffding_terms(k, eps);
    let kt = T::from_count(k);
    let c = rest * (kt + T::one()) - T::one();
    if !(c > T::zero()) {
        return Err(CtfError::Infeasible(format!(
            "K = {k} too small: the 1/(K+1) floor exceeds the per-index budget {b} \
             (|V| = {n_vars}, alpha = {alpha})"
        )));
    }
    let a = ratio * kt;
    let bq = ratio * kt * eps;
    let theta_g = (-bq + (bq * bq + T::lit(4.0) * a * c).sqrt()) / (a + a);
    let theta_g = theta_g.min(T::one());
    let theta_v = (ratio * theta_g).min(T::one());
    CtfThresholds::nonparametric(theta_g, theta_v, theta_v_prime.min(T::one()), eps)
}

/// Thresholds for the idealized bound: `J ν_G θ_V′ = α/2`, `|V| θ_G θ_V = α/2`,
/// `ε_G = 0`. Valid only as `K → ∞`.
pub fn choose_np_thresholds_asymptotic<T: Real>(
    alpha: T,
    n_vars: usize,
    nu_g: usize,
    j_bound: usize,
    ratio: T,
) -> Result<CtfThresholds<T>> {
    check_np_inputs(alpha, n_vars, nu_g, j_bound, ratio)?;
    let half = alpha * T::lit(0.5);
    let theta_v_prime = half / T::from_count(j_bound * nu_g);
    let theta_g = (half / (T::from_count(n_vars) * ratio))
        .sqrt()
        .min(T::one());
    let theta_v = (ratio * theta_g).min(T::one());
    CtfThresholds::nonparametric(theta_g, theta_v, theta_v_prime.min(T::one()), T::zero())
}

fn check_np_inputs<T: Real>(
    alpha: T,
    n_vars: usize,
    nu_g: usize,
    j_bound: usize,
    ratio: T,
) -> Result<()> {
    if !(alpha > T::zero() && alpha < T::one()) {
        return Err(CtfError::InvalidConfig(format!(
            "alpha = {alpha} must lie in (0, 1)"
        )));
    }
    if !(ratio > T::zero() && ratio.is_finite()) {
        return Err(CtfError::InvalidConfig(format!(
            "ratio = {ratio} must be positive"
        )));
    }
    if n_vars == 0 || nu_g == 0 || j_bound == 0 {
        return Err(CtfError::InvalidConfig(
            "n_vars, nu_g and j_bound must be positive".into(),
        ));
    }
    Ok(())
}

/// `θ_V/θ_G` matched to parametric thresholds:
/// `(1 − F_1(θ_V^par)) / (1 − F_{ν_G}(θ_G^par))`.
pub fn threshold_ratio<T: Real>(theta_g_par: T, theta_v_par: T, nu_g: u32) -> Result<T> {
    let num = crate::dist_kernels::chi2_sf(theta_v_par, 1)?;
    let den = crate::dist_kernels::chi2_sf(theta_g_par, nu_g)?;
    if !(den > T::zero()) {
        return Err(CtfError::domain("threshold_ratio", "cell tail underflows"));
    }
    Ok(num / den)
}

/// Applies `T̂_g ≤ θ_G`, `T̂_v^{θ_G,ε_G} ≤ θ_V` and `T̂_v ≤ θ_V′`.
pub fn run_nonparametric_test<T: Real>(
    data: &Dataset<T>,
    kind: ScoreKind,
    plan: &PermutationPlan,
    thresholds: &CtfThresholds<T>,
) -> Result<DiscoverySet<T>> {
    let proj = Projections::new(data);
    run_nonparametric_test_with(&proj, data.partition(), kind, plan, thresholds)
}

/// As [`run_nonparametric_test`] with precomputed projections.
///
/// Cells that are singular or whose conditioning set is empty are skipped
/// with a warning and listed in the result.
pub fn run_nonparametric_test_with<T: Real>(
    proj: &Projections<T>,
    partition: &Partition,
    kind: ScoreKind,
    plan: &PermutationPlan,
    thresholds: &CtfThresholds<T>,
) -> Result<DiscoverySet<T>> {
    if thresholds.regime != Regime::Nonparametric {
        return Err(CtfError::InvalidConfig(
            "permutation test needs nonparametric thresholds".into(),
        ));
    }
    thresholds.validate()?;
    let eps = thresholds.epsilon_g.unwrap_or_else(T::zero);
    let scorer = Scorer::new(proj, plan, kind)?;

    type CellOutcome<T> = std::result::Result<Vec<(usize, IndexStats<T>)>, SkippedCell>;
    let cell_scores = scorer.cells();
    let outcomes: Vec<CellOutcome<T>> = cell_scores
        .into_par_iter()
        .enumerate()
        .map(|(g, cell)| {
            let Some(cell) = cell else {
                return Err(SkippedCell {
                    cell: g,
                    reason: format!("singular design for cell {g}"),
                });
            };
            let cell_stat = hat_t(&cell);
            if !thresholds.cell_passes(cell_stat) {
                return Ok(Vec::new());
            }
            let counts = pooled_rank_counts(&cell);
            let mut rows = Vec::with_capacity(partition.cell(g).len());
            for &v in partition.cell(g) {
                let Some(var) = scorer.variable(v) else {
                    continue;
                };
                let index_stat = conditional_from_counts(&var, &counts, g, thresholds.theta_g, eps)
                    .map_err(|e| SkippedCell {
                        cell: g,
                        reason: e.to_string(),
                    })?;
                rows.push((
                    v,
                    IndexStats {
                        cell: g,
                        cell_stat,
                        index_stat,
                        marginal_stat: Some(hat_t(&var)),
                    },
                ));
            }
            Ok(rows)
        })
        .collect();

    let mut per_index = BTreeMap::new();
    let mut skipped = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(rows) => per_index.extend(rows),
            Err(s) => {
                warn!("cell {} excluded: {}", s.cell, s.reason);
                skipped.push(s);
            }
        }
    }
    Ok(DiscoverySet::from_stats(*thresholds, per_index, skipped))
}

/// Randomization p-values `(K·T̂_v + 1)/(K + 1)` for every variable; `None`
/// for constant columns.
pub fn marginal_pvalues<T: Real>(
    proj: &Projections<T>,
    plan: &PermutationPlan,
    kind: ScoreKind,
) -> Result<Vec<Option<T>>> {
    let scorer = Scorer::new(proj, plan, kind)?;
    let dirs = proj.var_directions();
    let coords = dirs.t().dot(&scorer.responses);
    let kt = T::from_count(plan.k);
    Ok((0..dirs.ncols())
        .into_par_iter()
        .map(|v| {
            if !proj.variable_ok(v) {
                return None;
            }
            let row = coords.row(v);
            let base = row[0] * row[0];
            let hits = row
                .iter()
                .skip(1)
                .filter(|&&s| at_least(s * s, base))
                .count();
            Some((T::from_count(hits) + T::one()) / (kt + T::one()))
        })
        .collect())
}
