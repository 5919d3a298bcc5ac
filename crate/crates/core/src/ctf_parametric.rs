//! Parametric coarse-to-fine test: FWER upper bounds, the power lower bound,
//! threshold optimization along the FWER level curve, and the decision rule.

use std::collections::BTreeMap;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discovery::{CtfThresholds, DiscoverySet, IndexStats, Regime, SkippedCell};
use crate::dist_kernels::{beta_sf, chi2_sf, log_c, nc_chi2_lower_tail_bound, TailBoundInput};
use crate::error::{CtfError, Result};
use crate::linear_scores::{Dataset, Partition, Projections};
use crate::scalar::Real;

/// Upper bound on the double-null quadrant probability
/// `P(T_g > θ_G, T_v > θ_V)` for a cell of `nu_g` indices:
///
/// `C(ν) e^{−θ_G/2} θ_G^{ν/2} (1 − G_β(θ_V/θ_G, 1/2, (ν+1)/2)) + 1 − F_1(θ_G − ν + 1)`.
///
/// The second term is taken as 1 when `θ_G ≤ ν − 1`. For `θ_V ≥ θ_G` the
/// beta factor vanishes. The result is clamped to `[0, 1]`.
pub fn p00_bound<T: Real>(theta_g: T, theta_v: T, nu_g: u32) -> Result<T> {
    if !(theta_g > T::zero() && theta_v > T::zero()) {
        return Err(CtfError::domain("p00_bound", "thresholds must be positive"));
    }
    if nu_g == 0 {
        return Err(CtfError::domain("p00_bound", "nu_g must be >= 1"));
    }
    let nu = T::from_count(nu_g as usize);
    let half = T::lit(0.5);
    let term2 = {
        let z = theta_g - nu + T::one();
        if z > T::zero() {
            chi2_sf(z, 1)?
        } else {
            T::one()
        }
    };
    let term1 = if theta_g.is_infinite() {
        T::zero()
    } else {
        let ratio = (theta_v / theta_g).min(T::one());
        let tail = beta_sf(ratio, half, (nu + T::one()) * half)?;
        if tail > T::zero() {
            let log_mass = log_c::<T>(nu_g)? - theta_g * half + nu * half * theta_g.ln();
            (log_mass + tail.ln()).exp()
        } else {
            T::zero()
        }
    };
    Ok((term1 + term2).min(T::one()).max(T::zero()))
}

/// `1 − F_1(θ_V)`, the single-index null tail.
pub fn p0_bound<T: Real>(theta_v: T) -> Result<T> {
    if !(theta_v >= T::zero()) {
        return Err(CtfError::domain("p0_bound", "theta_v must be non-negative"));
    }
    chi2_sf(theta_v, 1)
}

/// `|V|·p00(θ_G, θ_V) + J·ν_G·p0(θ_V)`; not clamped.
pub fn fwer_bound<T: Real>(
    theta_g: T,
    theta_v: T,
    n_vars: usize,
    nu_g: u32,
    j_bound: usize,
) -> Result<T> {
    let p00 = p00_bound(theta_g, theta_v, nu_g)?;
    let p0 = p0_bound(theta_v)?;
    Ok(T::from_count(n_vars) * p00 + T::from_count(j_bound * nu_g as usize) * p0)
}

/// Bound for unequal cells: each cell contributes `|g|·p00(√|g|·θ_G, θ_V, |g|)`
/// and the index term uses the largest cell.
pub fn fwer_bound_varcells<T: Real>(
    partition: &Partition,
    theta_g: T,
    theta_v: T,
    j_bound: usize,
) -> Result<T> {
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for cell in partition.cells() {
        *sizes.entry(cell.len()).or_default() += 1;
    }
    let mut total = T::zero();
    for (&size, &count) in &sizes {
        let s = T::from_count(size);
        let nu = u32::try_from(size)
            .map_err(|_| CtfError::domain("fwer_bound_varcells", "cell too large"))?;
        total += T::from_count(count) * s * p00_bound(s.sqrt() * theta_g, theta_v, nu)?;
    }
    let p0 = p0_bound(theta_v)?;
    Ok(total + T::from_count(j_bound * partition.nu_g_max()) * p0)
}

/// Noncentrality model used for power: `T_g ~ χ²(nρ_g, ν_G)` and
/// `T_v ~ χ²(nρ_v, 1)` for an active index in an active cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct PowerTarget<T> {
    pub rho_g: T,
    pub rho_v: T,
    pub n: usize,
    pub nu_g: u32,
    pub j_bound: usize,
}

impl<T: Real> PowerTarget<T> {
    pub fn new(rho_g: T, rho_v: T, n: usize, nu_g: u32, j_bound: usize) -> Result<Self> {
        if !(rho_v > T::zero() && rho_g >= rho_v && rho_g.is_finite()) {
            return Err(CtfError::InvalidConfig(format!(
                "need rho_g >= rho_v > 0, got rho_g = {rho_g}, rho_v = {rho_v}"
            )));
        }
        if j_bound == 0 || n == 0 || nu_g == 0 {
            return Err(CtfError::InvalidConfig(
                "n, nu_g and j_bound must be positive".into(),
            ));
        }
        Ok(Self {
            rho_g,
            rho_v,
            n,
            nu_g,
            j_bound,
        })
    }

    /// `ρ_g = 2/J`, `ρ_v = 1/J`.
    pub fn default_rule(n: usize, nu_g: u32, j_bound: usize) -> Result<Self> {
        let j = T::from_count(j_bound.max(1));
        Self::new(T::lit(2.0) / j, T::one() / j, n, nu_g, j_bound)
    }

    /// Effect-size rule: `ρ_v = η`, `ρ_g = k·η` where `k` is the number of
    /// active indices expected per active cell.
    pub fn from_effect_size(
        eta: T,
        actives_per_cell: usize,
        n: usize,
        nu_g: u32,
        j_bound: usize,
    ) -> Result<Self> {
        Self::new(
            T::from_count(actives_per_cell.max(1)) * eta,
            eta,
            n,
            nu_g,
            j_bound,
        )
    }

    pub fn cap_g(&self) -> T {
        T::from_count(self.n) * self.rho_g + T::from_count(self.nu_g as usize)
    }

    pub fn cap_v(&self) -> T {
        T::from_count(self.n) * self.rho_v + T::one()
    }
}

/// How the power target is derived from `(n, ν_G, J)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum TargetRule {
    /// `ρ_g = 2/J`, `ρ_v = 1/J`.
    #[default]
    Default,
    /// `ρ_v = η`, `ρ_g = k·η`.
    EffectSize { eta: f64, actives_per_cell: usize },
}

impl TargetRule {
    pub fn target<T: Real>(&self, n: usize, nu_g: u32, j_bound: usize) -> Result<PowerTarget<T>> {
        match *self {
            TargetRule::Default => PowerTarget::default_rule(n, nu_g, j_bound),
            TargetRule::EffectSize {
                eta,
                actives_per_cell,
            } => PowerTarget::from_effect_size(T::lit(eta), actives_per_cell, n, nu_g, j_bound),
        }
    }
}

/// `1 − e^{−(ν₁+ρ₁−θ₁)²/(4(ν₁+2ρ₁))} − e^{−(ν₂+ρ₂−θ₂)²/(4(ν₂+2ρ₂))}` with
/// `(ρ₁, ν₁) = (nρ_g, ν_G)` and `(ρ₂, ν₂) = (nρ_v, 1)`. May be negative.
pub fn power_lower_bound<T: Real>(theta_1: T, theta_2: T, target: &PowerTarget<T>) -> Result<T> {
    let n = T::from_count(target.n);
    let e1 =
        nc_chi2_lower_tail_bound(&TailBoundInput::new(theta_1, n * target.rho_g, target.nu_g))?;
    let e2 = nc_chi2_lower_tail_bound(&TailBoundInput::new(theta_2, n * target.rho_v, 1))?;
    Ok(T::one() - e1 - e2)
}

/// Thresholds returned by [`optimize_thresholds`] with their bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct OptimizedThresholds<T> {
    pub thresholds: CtfThresholds<T>,
    pub fwer_bound: T,
    pub power_bound: T,
}

const GRID_POINTS: usize = 256;
const BISECTION_STEPS: usize = 200;
const GOLDEN_STEPS: usize = 80;

struct LevelCurve<'a, T> {
    alpha: T,
    n_vars: usize,
    nu_g: u32,
    target: &'a PowerTarget<T>,
}

impl<T: Real> LevelCurve<'_, T> {
    fn fwer(&self, theta_g: T, theta_v: T) -> Result<T> {
        fwer_bound(
            theta_g,
            theta_v,
            self.n_vars,
            self.nu_g,
            self.target.j_bound,
        )
    }

    fn v_ceiling(&self, theta_g: T) -> T {
        self.target.cap_v().min(theta_g)
    }

    /// Smallest feasible `θ_V` at this `θ_G`, if any satisfies `θ_V < θ_G`.
    fn solve_theta_v(&self, theta_g: T) -> Result<Option<T>> {
        let ceiling = self.v_ceiling(theta_g);
        if self.fwer(theta_g, ceiling)? > self.alpha {
            return Ok(None);
        }
        let mut lo = T::zero();
        let mut hi = ceiling;
        for _ in 0..BISECTION_STEPS {
            let mid = (lo + hi) * T::lit(0.5);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.fwer(theta_g, mid)? <= self.alpha {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok((hi < theta_g).then_some(hi))
    }

    /// Smallest `θ_G` at which some `θ_V` within the caps is feasible.
    fn theta_g_floor(&self) -> Result<Option<T>> {
        let cap_g = self.target.cap_g();
        if self.fwer(cap_g, self.v_ceiling(cap_g))? > self.alpha {
            return Ok(None);
        }
        let mut lo = (T::from_count(self.nu_g as usize) - T::one()).max(T::zero());
        let mut hi = cap_g;
        for _ in 0..BISECTION_STEPS {
            let mid = (lo + hi) * T::lit(0.5);
            if mid <= lo || mid >= hi {
                break;
            }
            let ok = mid > T::zero() && self.fwer(mid, self.v_ceiling(mid))? <= self.alpha;
            if ok {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(Some(hi))
    }

    /// Power on the level curve, `None` where infeasible.
    fn point(&self, theta_g: T) -> Result<Option<(T, T, T)>> {
        let Some(theta_v) = self.solve_theta_v(theta_g)? else {
            return Ok(None);
        };
        let power = power_lower_bound(theta_g, theta_v, self.target)?;
        Ok(Some((theta_g, theta_v, power)))
    }
}

fn better<T: Real>(candidate: (T, T, T), incumbent: Option<(T, T, T)>) -> bool {
    match incumbent {
        None => true,
        Some((_, v, p)) => candidate.2 > p || (candidate.2 == p && candidate.1 < v),
    }
}

/// Maximizes [`power_lower_bound`] subject to `fwer_bound ≤ α` and the caps
/// `θ_G ≤ nρ_g + ν_G`, `θ_V ≤ nρ_v + 1`.
///
/// `θ_G` runs over a log-spaced grid from the smallest feasible value to its
/// cap; at each grid point `θ_V` is the level-curve solution by bisection.
/// The grid argmax is then refined by golden-section search. Among equal
/// power values the smaller `θ_V` wins.
pub fn optimize_thresholds<T: Real>(
    alpha: T,
    n_vars: usize,
    nu_g: u32,
    target: &PowerTarget<T>,
) -> Result<OptimizedThresholds<T>> {
    if !(alpha > T::zero() && alpha < T::one()) {
        return Err(CtfError::InvalidConfig(format!(
            "alpha = {alpha} must lie in (0, 1)"
        )));
    }
    if nu_g != target.nu_g {
        return Err(CtfError::InvalidConfig(format!(
            "cell size {nu_g} differs from the power target's {}",
            target.nu_g
        )));
    }
    if n_vars == 0 {
        return Err(CtfError::InvalidConfig("n_vars must be positive".into()));
    }
    let curve = LevelCurve {
        alpha,
        n_vars,
        nu_g,
        target,
    };
    let infeasible = || {
        CtfError::Infeasible(format!(
            "no thresholds within the caps reach FWER bound {alpha} \
             (|V| = {n_vars}, nu_g = {nu_g}, J = {}, n = {})",
            target.j_bound, target.n
        ))
    };
    let lo = curve.theta_g_floor()?.ok_or_else(infeasible)?;
    let hi = target.cap_g();

    let grid: Vec<T> = if hi > lo {
        let (a, b) = (lo.ln(), hi.ln());
        (0..GRID_POINTS)
            .map(|i| {
                if i + 1 == GRID_POINTS {
                    hi
                } else {
                    (a + (b - a) * T::from_count(i) / T::from_count(GRID_POINTS - 1)).exp()
                }
            })
            .collect()
    } else {
        vec![hi]
    };
    let points: Vec<Option<(T, T, T)>> = grid
        .iter()
        .map(|&g| curve.point(g))
        .collect::<Result<_>>()?;

    let mut best: Option<(T, T, T)> = None;
    let mut best_idx = 0;
    for (i, p) in points.iter().enumerate() {
        if let Some(p) = *p {
            if better(p, best) {
                best = Some(p);
                best_idx = i;
            }
        }
    }
    let mut best = best.ok_or_else(infeasible)?;

    if grid.len() > 2 {
        let mut a = grid[best_idx.saturating_sub(1)];
        let mut b = grid[(best_idx + 1).min(grid.len() - 1)];
        let inv_phi = T::lit(0.618_033_988_749_894_8);
        let eval = |g: T| -> Result<Option<(T, T, T)>> { curve.point(g) };
        let score = |p: Option<(T, T, T)>| p.map_or(T::neg_infinity(), |p| p.2);
        let mut c = b - (b - a) * inv_phi;
        let mut d = a + (b - a) * inv_phi;
        let mut pc = eval(c)?;
        let mut pd = eval(d)?;
        for _ in 0..GOLDEN_STEPS {
            if score(pc) >= score(pd) {
                b = d;
                d = c;
                pd = pc;
                c = b - (b - a) * inv_phi;
                pc = eval(c)?;
            } else {
                a = c;
                c = d;
                pc = pd;
                d = a + (b - a) * inv_phi;
                pd = eval(d)?;
            }
            for p in [pc, pd].into_iter().flatten() {
                if better(p, Some(best)) {
                    best = p;
                }
            }
        }
    }

    let (theta_g, theta_v, power) = best;
    let fwer = curve.fwer(theta_g, theta_v)?;
    Ok(OptimizedThresholds {
        thresholds: CtfThresholds::parametric(theta_g, theta_v)?,
        fwer_bound: fwer,
        power_bound: power,
    })
}

/// Serializable summary of an optimization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub format_version: u32,
    pub theta_g: f64,
    pub theta_v: f64,
    pub fwer_bound: f64,
    pub power_bound: f64,
    pub alpha: f64,
    pub j_bound: usize,
    pub inputs: ThresholdInputs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdInputs {
    pub n_vars: usize,
    pub nu_g: u32,
    pub n: usize,
    pub rho_g: f64,
    pub rho_v: f64,
}

impl ThresholdReport {
    pub fn new<T: Real>(
        opt: &OptimizedThresholds<T>,
        alpha: T,
        n_vars: usize,
        target: &PowerTarget<T>,
    ) -> Self {
        Self {
            format_version: crate::FORMAT_VERSION,
            theta_g: opt.thresholds.theta_g.as_f64(),
            theta_v: opt.thresholds.theta_v.as_f64(),
            fwer_bound: opt.fwer_bound.as_f64(),
            power_bound: opt.power_bound.as_f64(),
            alpha: alpha.as_f64(),
            j_bound: target.j_bound,
            inputs: ThresholdInputs {
                n_vars,
                nu_g: target.nu_g,
                n: target.n,
                rho_g: target.rho_g.as_f64(),
                rho_v: target.rho_v.as_f64(),
            },
        }
    }
}

/// Applies the parametric rule `T_g > θ_G` and `T_v > θ_V`.
pub fn run_parametric_test<T: Real>(
    data: &Dataset<T>,
    thresholds: &CtfThresholds<T>,
) -> Result<DiscoverySet<T>> {
    let proj = Projections::new(data);
    run_parametric_test_with(&proj, data.partition(), thresholds)
}

/// As [`run_parametric_test`] with precomputed projections.
///
/// Singular cells are skipped with a warning and listed in the result.
pub fn run_parametric_test_with<T: Real>(
    proj: &Projections<T>,
    partition: &Partition,
    thresholds: &CtfThresholds<T>,
) -> Result<DiscoverySet<T>> {
    if thresholds.regime != Regime::Parametric {
        return Err(CtfError::InvalidConfig(
            "parametric test needs parametric thresholds".into(),
        ));
    }
    thresholds.validate()?;
    type CellOutcome<T> = std::result::Result<Vec<(usize, IndexStats<T>)>, SkippedCell>;
    let outcomes: Vec<CellOutcome<T>> = (0..partition.n_cells())
        .into_par_iter()
        .map(|g| {
            let cell_stat = match proj.cell_score(g) {
                Ok(s) => s,
                Err(e) => {
                    return Err(SkippedCell {
                        cell: g,
                        reason: e.to_string(),
                    })
                }
            };
            if !thresholds.cell_passes(cell_stat) {
                return Ok(Vec::new());
            }
            Ok(partition
                .cell(g)
                .iter()
                .filter_map(|&v| {
                    let index_stat = proj.variable_score(v).ok()?;
                    Some((
                        v,
                        IndexStats {
                            cell: g,
                            cell_stat,
                            index_stat,
                            marginal_stat: None,
                        },
                    ))
                })
                .collect())
        })
        .collect();

    let mut per_index = BTreeMap::new();
    let mut skipped = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(rows) => per_index.extend(rows),
            Err(s) => {
                warn!("cell {} excluded from screening: {}", s.cell, s.reason);
                skipped.push(s);
            }
        }
    }
    Ok(DiscoverySet::from_stats(*thresholds, per_index, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p00_limits() {
        let small: f64 = p00_bound(40.0, 1e-300, 10).unwrap();
        let lc: f64 = log_c(10).unwrap();
        let mass = (lc - 20.0 + 5.0 * 40f64.ln()).exp();
        let tail = chi2_sf(31.0, 1).unwrap();
        assert!((small - (mass + tail)).abs() < 1e-15);
        assert_eq!(p00_bound(5.0, 1.0, 10).unwrap(), 1.0);
        assert!(p00_bound(0.0, 1.0, 10).is_err());
        assert!(p00_bound(10.0, 0.0, 10).is_err());
    }

    #[test]
    fn p00_beta_factor_vanishes_above_theta_g() {
        let b: f64 = p00_bound(40.0, 45.0, 10).unwrap();
        assert!((b - chi2_sf(31.0, 1).unwrap()).abs() < 1e-18);
    }

    #[test]
    fn fwer_monotone_in_j() {
        let a = fwer_bound(40.0, 15.0, 10_000, 10, 1).unwrap();
        let b = fwer_bound(40.0, 15.0, 10_000, 10, 1000).unwrap();
        assert!(b >= a);
    }

    #[test]
    fn power_bound_at_means() {
        let t = PowerTarget::new(0.1, 0.05, 100, 10, 5).unwrap();
        let p: f64 = power_lower_bound(20.0, 6.0, &t).unwrap();
        assert!((p + 1.0).abs() < 1e-15);
        assert!(power_lower_bound(20.5, 1.0, &t).is_err());
    }

    #[test]
    fn optimizer_lands_on_level_curve() {
        let t = PowerTarget::<f64>::default_rule(1000, 10, 25).unwrap();
        let opt = optimize_thresholds(0.05, 10_000, 10, &t).unwrap();
        let th = opt.thresholds;
        assert!(th.theta_g > th.theta_v && th.theta_v > 0.0);
        assert!(opt.fwer_bound <= 0.05);
        assert!(opt.fwer_bound >= 0.05 * (1.0 - 1e-6));
        assert!(th.theta_g <= t.cap_g() && th.theta_v <= t.cap_v());
    }

    #[test]
    fn optimizer_rejects_impossible_targets() {
        let t = PowerTarget::<f64>::new(1e-4, 1e-4, 10, 10, 25).unwrap();
        let err = optimize_thresholds(0.05, 10_000, 10, &t).unwrap_err();
        assert!(err.is_infeasible());
    }
}
