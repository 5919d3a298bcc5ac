//! Gaussian linear model, projection scores and synthetic data.
//!
//! The cell score is the excess regression sum of squares of `y` on the
//! cell's columns plus an intercept, normalized by the variance of `y`:
//! `T_g = (‖P_g y‖² − ‖ȳ‖²) / σ_Y²`. Because `ȳ` lies in every projection
//! space, that difference equals the squared norm of the projection of the
//! centered response onto the span of the centered columns, which is how it
//! is computed here.

mod io;
pub(crate) mod qr;

pub use io::{read_dataset_csv, read_partition_csv, write_dataset_csv, write_partition_csv};

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ShapeBuilder};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CtfError, Result};
use crate::scalar::Real;
use qr::{orthonormal_basis, Basis, RANK_TOL};

/// Disjoint cover of the variable indices `0..n_vars` by non-empty cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    cells: Vec<Vec<usize>>,
    cell_of: Vec<usize>,
    nu_g_max: usize,
    #[serde(default)]
    cell_names: Vec<String>,
}

impl Partition {
    /// Validates disjointness and coverage of `0..n_vars`.
    pub fn new(cells: Vec<Vec<usize>>, n_vars: usize) -> Result<Self> {
        let mut cell_of = vec![usize::MAX; n_vars];
        for (g, cell) in cells.iter().enumerate() {
            if cell.is_empty() {
                return Err(CtfError::InvalidConfig(format!("cell {g} is empty")));
            }
            for &v in cell {
                if v >= n_vars {
                    return Err(CtfError::InvalidConfig(format!(
                        "cell {g} references variable {v} but there are only {n_vars}"
                    )));
                }
                if cell_of[v] != usize::MAX {
                    return Err(CtfError::InvalidConfig(format!(
                        "variable {v} appears in cells {} and {g}",
                        cell_of[v]
                    )));
                }
                cell_of[v] = g;
            }
        }
        if let Some(v) = cell_of.iter().position(|&g| g == usize::MAX) {
            return Err(CtfError::InvalidConfig(format!(
                "variable {v} is not assigned to any cell"
            )));
        }
        let nu_g_max = cells.iter().map(Vec::len).max().unwrap_or(0);
        let cell_names = (0..cells.len()).map(|g| format!("g{g}")).collect();
        Ok(Self {
            cells,
            cell_of,
            nu_g_max,
            cell_names,
        })
    }

    /// Contiguous cells `{0..s}, {s..2s}, ...`; `cell_size` must divide `n_vars`.
    pub fn uniform(n_vars: usize, cell_size: usize) -> Result<Self> {
        if cell_size == 0 || n_vars == 0 || !n_vars.is_multiple_of(cell_size) {
            return Err(CtfError::InvalidConfig(format!(
                "cell size {cell_size} must be positive and divide {n_vars}"
            )));
        }
        let cells = (0..n_vars / cell_size)
            .map(|g| (g * cell_size..(g + 1) * cell_size).collect())
            .collect();
        Self::new(cells, n_vars)
    }

    pub fn with_cell_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.cells.len() {
            return Err(CtfError::InvalidConfig(format!(
                "{} cell names for {} cells",
                names.len(),
                self.cells.len()
            )));
        }
        self.cell_names = names;
        Ok(self)
    }

    pub fn cells(&self) -> &[Vec<usize>] {
        &self.cells
    }

    pub fn cell(&self, g: usize) -> &[usize] {
        &self.cells[g]
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn n_vars(&self) -> usize {
        self.cell_of.len()
    }

    /// Cell containing variable `v`.
    pub fn cell_of(&self, v: usize) -> usize {
        self.cell_of[v]
    }

    /// Size of the largest cell.
    pub fn nu_g_max(&self) -> usize {
        self.nu_g_max
    }

    pub fn cell_name(&self, g: usize) -> &str {
        &self.cell_names[g]
    }
}

/// Observed response, design and partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    y: Array1<T>,
    /// `n × |V|`, column per variable.
    x: Array2<T>,
    partition: Partition,
    true_active: Option<Vec<usize>>,
    sigma_y_sq: Option<T>,
    variable_names: Vec<String>,
}

impl<T: Real> Dataset<T> {
    pub fn new(y: Array1<T>, x: Array2<T>, partition: Partition) -> Result<Self> {
        let n = y.len();
        if n < 3 {
            return Err(CtfError::InvalidConfig(format!(
                "need at least 3 samples, got {n}"
            )));
        }
        if x.nrows() != n {
            return Err(CtfError::InvalidConfig(format!(
                "design has {} rows but response has {n}",
                x.nrows()
            )));
        }
        if x.ncols() != partition.n_vars() {
            return Err(CtfError::InvalidConfig(format!(
                "design has {} columns but partition covers {}",
                x.ncols(),
                partition.n_vars()
            )));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(CtfError::InvalidConfig("non-finite value in data".into()));
        }
        let variable_names = (0..x.ncols()).map(|v| format!("v{v}")).collect();
        Ok(Self {
            y,
            x,
            partition,
            true_active: None,
            sigma_y_sq: None,
            variable_names,
        })
    }

    /// Fix `σ_Y²` instead of estimating it from `y`.
    pub fn with_sigma_y_sq(mut self, sigma_y_sq: T) -> Result<Self> {
        if !(sigma_y_sq > T::zero() && sigma_y_sq.is_finite()) {
            return Err(CtfError::InvalidConfig(
                "sigma_y_sq must be positive".into(),
            ));
        }
        self.sigma_y_sq = Some(sigma_y_sq);
        Ok(self)
    }

    pub fn with_true_active(mut self, mut active: Vec<usize>) -> Result<Self> {
        active.sort_unstable();
        active.dedup();
        if active.last().is_some_and(|&v| v >= self.n_vars()) {
            return Err(CtfError::InvalidConfig("active index out of range".into()));
        }
        self.true_active = Some(active);
        Ok(self)
    }

    pub fn with_variable_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_vars() {
            return Err(CtfError::InvalidConfig(format!(
                "{} names for {} variables",
                names.len(),
                self.n_vars()
            )));
        }
        self.variable_names = names;
        Ok(self)
    }

    pub fn y(&self) -> ArrayView1<'_, T> {
        self.y.view()
    }

    pub fn x(&self) -> &Array2<T> {
        &self.x
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn true_active(&self) -> Option<&[usize]> {
        self.true_active.as_deref()
    }

    pub fn variable_names(&self) -> &[String] {
        &self.variable_names
    }

    pub fn n_samples(&self) -> usize {
        self.y.len()
    }

    pub fn n_vars(&self) -> usize {
        self.x.ncols()
    }

    /// Supplied `σ_Y²`, or the sample variance of `y` with divisor `n − 1`.
    pub fn sigma_y_sq(&self) -> T {
        if let Some(s) = self.sigma_y_sq {
            return s;
        }
        let yc = centered_response(self.y.view());
        let ss: T = yc.iter().map(|&v| v * v).sum();
        ss / T::from_count(self.n_samples() - 1)
    }
}

/// `y − ȳ`, snapped to exactly zero when `y` is constant up to rounding.
pub(crate) fn centered_response<T: Real>(y: ArrayView1<'_, T>) -> Array1<T> {
    let n = T::from_count(y.len());
    let mean = y.iter().copied().sum::<T>() / n;
    let yc = y.mapv(|v| v - mean);
    let scale = y.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let spread = yc.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    if spread <= T::epsilon() * T::lit(64.0) * scale {
        Array1::zeros(y.len())
    } else {
        yc
    }
}

fn centered_column<T: Real>(col: ArrayView1<'_, T>) -> Array1<T> {
    let mean = col.iter().copied().sum::<T>() / T::from_count(col.len());
    col.mapv(|v| v - mean)
}

/// Precomputed projection geometry of a dataset: an orthonormal basis of
/// each centered cell design and the unit direction of each centered column.
///
/// Scores of any response vector (in particular permuted copies of `y`) are
/// then `‖Bᵀ y_c‖² / σ_Y²`.
#[derive(Debug, Clone)]
pub struct Projections<T> {
    y_centered: Array1<T>,
    sigma_y_sq: T,
    /// Cell bases side by side, `n × Σ|g|` over non-singular cells.
    stack: Array2<T>,
    /// Column range of each cell in `stack`, `None` if singular.
    ranges: Vec<Option<Range<usize>>>,
    /// `n × |V|`; column `v` is zero when `v` is constant.
    var_dirs: Array2<T>,
    var_ok: Vec<bool>,
}

impl<T: Real> Projections<T> {
    pub fn new(data: &Dataset<T>) -> Self {
        let n = data.n_samples();
        let partition = data.partition();

        let tol = T::tolerance(RANK_TOL);
        let mut var_dirs = Array2::<T>::zeros((n, data.n_vars()).f());
        let mut var_ok = vec![false; data.n_vars()];
        let mut centered = Array2::<T>::zeros((n, data.n_vars()).f());
        for (v, ok) in var_ok.iter_mut().enumerate() {
            let raw = data.x().column(v);
            let raw_norm = raw.iter().map(|&e| e * e).sum::<T>().sqrt();
            let c = centered_column(raw);
            let norm = c.iter().map(|&e| e * e).sum::<T>().sqrt();
            if norm > tol * raw_norm && norm > T::zero() {
                var_dirs.column_mut(v).assign(&c.mapv(|e| e / norm));
                *ok = true;
            }
            centered.column_mut(v).assign(&c);
        }

        let bases: Vec<Option<Array2<T>>> = (0..partition.n_cells())
            .into_par_iter()
            .map(|g| {
                let cols = partition.cell(g);
                if cols.len() + 1 >= n {
                    return None;
                }
                let mut design = Array2::<T>::zeros((n, cols.len()).f());
                for (j, &v) in cols.iter().enumerate() {
                    design.column_mut(j).assign(&centered.column(v));
                }
                match orthonormal_basis(design.view()) {
                    Basis::Full(q) => Some(q),
                    Basis::Deficient { .. } => None,
                }
            })
            .collect();

        let total: usize = bases.iter().flatten().map(|b| b.ncols()).sum();
        let mut stack = Array2::<T>::zeros((n, total).f());
        let mut ranges = Vec::with_capacity(bases.len());
        let mut at = 0;
        for b in &bases {
            ranges.push(b.as_ref().map(|b| {
                stack.slice_mut(s![.., at..at + b.ncols()]).assign(b);
                at += b.ncols();
                at - b.ncols()..at
            }));
        }

        Self {
            y_centered: centered_response(data.y()),
            sigma_y_sq: data.sigma_y_sq(),
            stack,
            ranges,
            var_dirs,
            var_ok,
        }
    }

    pub fn y_centered(&self) -> ArrayView1<'_, T> {
        self.y_centered.view()
    }

    pub fn sigma_y_sq(&self) -> T {
        self.sigma_y_sq
    }

    /// Orthonormal basis of the centered cell design, `None` if singular.
    pub fn cell_basis(&self, g: usize) -> Option<ArrayView2<'_, T>> {
        let r = self.ranges[g].clone()?;
        Some(self.stack.slice(s![.., r]))
    }

    /// All cell bases side by side; see [`Projections::cell_columns`].
    pub fn basis_stack(&self) -> &Array2<T> {
        &self.stack
    }

    /// Columns of [`Projections::basis_stack`] belonging to cell `g`.
    pub fn cell_columns(&self, g: usize) -> Option<Range<usize>> {
        self.ranges[g].clone()
    }

    pub fn var_directions(&self) -> &Array2<T> {
        &self.var_dirs
    }

    pub fn variable_ok(&self, v: usize) -> bool {
        self.var_ok[v]
    }

    pub fn n_cells(&self) -> usize {
        self.ranges.len()
    }

    fn normalize(&self, ss: T) -> T {
        if ss == T::zero() {
            T::zero()
        } else {
            ss / self.sigma_y_sq
        }
    }

    /// Cell score of an arbitrary centered response.
    pub fn cell_score_of(&self, g: usize, yc: ArrayView1<'_, T>) -> Result<T> {
        let basis = self.cell_basis(g).ok_or_else(|| CtfError::Singular {
            what: format!("cell {g}"),
        })?;
        let coords = basis.t().dot(&yc);
        Ok(self.normalize(coords.iter().map(|&c| c * c).sum()))
    }

    /// Variable score of an arbitrary centered response.
    pub fn variable_score_of(&self, v: usize, yc: ArrayView1<'_, T>) -> Result<T> {
        if !self.var_ok[v] {
            return Err(CtfError::Singular {
                what: format!("constant column {v}"),
            });
        }
        let s = self.var_dirs.column(v).dot(&yc);
        Ok(self.normalize(s * s))
    }

    pub fn cell_score(&self, g: usize) -> Result<T> {
        self.cell_score_of(g, self.y_centered.view())
    }

    pub fn variable_score(&self, v: usize) -> Result<T> {
        self.variable_score_of(v, self.y_centered.view())
    }

    /// All scores of the observed response.
    pub fn score_table(&self) -> ScoreTable<T> {
        let cells = (0..self.n_cells())
            .into_par_iter()
            .map(|g| self.cell_score(g).ok())
            .collect();
        let variables = (0..self.var_ok.len())
            .map(|v| self.variable_score(v).ok())
            .collect();
        ScoreTable { cells, variables }
    }
}

/// Observed scores; `None` marks singular cells or constant columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable<T> {
    pub cells: Vec<Option<T>>,
    pub variables: Vec<Option<T>>,
}

/// `T_g = (‖P_g y‖² − ‖ȳ‖²) / σ_Y²` for cell `g`.
pub fn cell_score<T: Real>(data: &Dataset<T>, g: usize) -> Result<T> {
    let p = data.partition();
    if g >= p.n_cells() {
        return Err(CtfError::InvalidConfig(format!("no cell {g}")));
    }
    let n = data.n_samples();
    let cols = p.cell(g);
    if cols.len() + 1 >= n {
        return Err(CtfError::Singular {
            what: format!("cell {g}: {} columns with {n} samples", cols.len()),
        });
    }
    let mut design = Array2::<T>::zeros((n, cols.len()).f());
    for (j, &v) in cols.iter().enumerate() {
        design
            .column_mut(j)
            .assign(&centered_column(data.x().column(v)));
    }
    let q = match orthonormal_basis(design.view()) {
        Basis::Full(q) => q,
        Basis::Deficient { rank } => {
            return Err(CtfError::Singular {
                what: format!("cell {g} (numerical rank {rank} of {})", cols.len()),
            })
        }
    };
    let yc = centered_response(data.y());
    let ss: T = q.t().dot(&yc).iter().map(|&c| c * c).sum();
    Ok(if ss == T::zero() {
        T::zero()
    } else {
        ss / data.sigma_y_sq()
    })
}

/// `T_v = (‖P_v y‖² − ‖ȳ‖²) / σ_Y²` for variable `v`.
pub fn variable_score<T: Real>(data: &Dataset<T>, v: usize) -> Result<T> {
    if v >= data.n_vars() {
        return Err(CtfError::InvalidConfig(format!("no variable {v}")));
    }
    let raw = data.x().column(v);
    let raw_norm = raw.iter().map(|&e| e * e).sum::<T>().sqrt();
    let xc = centered_column(raw);
    let norm_sq: T = xc.iter().map(|&e| e * e).sum();
    if !(norm_sq.sqrt() > T::tolerance(RANK_TOL) * raw_norm) || norm_sq == T::zero() {
        return Err(CtfError::Singular {
            what: format!("constant column {v}"),
        });
    }
    let yc = centered_response(data.y());
    let s = xc.dot(&yc);
    if s == T::zero() {
        return Ok(T::zero());
    }
    Ok(s * s / (norm_sq * data.sigma_y_sq()))
}

/// Simulation parameters for the Gaussian linear model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// `|V|`.
    pub n_vars: usize,
    /// `|g|`, identical for every cell.
    pub cell_size: usize,
    /// `n`.
    pub n_samples: usize,
    /// `|A|`.
    pub n_active: usize,
    /// Active indices per active cell.
    pub actives_per_cell: usize,
    /// Common coefficient `a_v` of the active variables.
    pub coef: f64,
    /// `σ_v²`.
    pub var_x: f64,
    /// `σ²` of the additive noise.
    pub var_noise: f64,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CtfError::InvalidConfig(m));
        if self.n_samples < 3 {
            return bad(format!("n_samples = {} < 3", self.n_samples));
        }
        if self.cell_size == 0 || self.n_vars == 0 || !self.n_vars.is_multiple_of(self.cell_size) {
            return bad(format!(
                "cell_size {} must divide n_vars {}",
                self.cell_size, self.n_vars
            ));
        }
        if self.n_active > self.n_vars {
            return bad("n_active exceeds n_vars".into());
        }
        if self.n_active > 0 {
            if self.actives_per_cell == 0 || self.actives_per_cell > self.cell_size {
                return bad(format!(
                    "actives_per_cell {} must lie in 1..={}",
                    self.actives_per_cell, self.cell_size
                ));
            }
            if !self.n_active.is_multiple_of(self.actives_per_cell) {
                return bad(format!(
                    "n_active {} is not a multiple of actives_per_cell {}",
                    self.n_active, self.actives_per_cell
                ));
            }
            if self.n_active / self.actives_per_cell > self.n_vars / self.cell_size {
                return bad("more active cells than cells".into());
            }
        }
        if !(self.var_x > 0.0 && self.var_noise >= 0.0 && self.coef.is_finite()) {
            return bad("variances must be positive and coef finite".into());
        }
        Ok(())
    }

    pub fn n_active_cells(&self) -> usize {
        if self.n_active == 0 {
            0
        } else {
            self.n_active / self.actives_per_cell
        }
    }

    /// Variance of `y` implied by the model, `Σ a_v² σ_v² + σ²`.
    pub fn sigma_y_sq(&self) -> f64 {
        self.n_active as f64 * self.coef * self.coef * self.var_x + self.var_noise
    }

    /// Index-level effect size `a_v² σ_v² / σ_Y²`.
    pub fn index_effect_size(&self) -> f64 {
        self.coef * self.coef * self.var_x / self.sigma_y_sq()
    }

    /// Sets `coef` so that every active index explains the fraction `effect`
    /// of the response variance.
    pub fn with_index_effect_size(mut self, effect: f64) -> Result<Self> {
        let total = effect * self.n_active as f64;
        if !(effect > 0.0 && total < 1.0) {
            return Err(CtfError::InvalidConfig(format!(
                "index effect size {effect} with {} actives is not attainable",
                self.n_active
            )));
        }
        let signal = effect * self.var_noise / (1.0 - total);
        self.coef = (signal / self.var_x).sqrt();
        Ok(self)
    }
}

/// Draws a dataset from the linear model `Y = Σ_{v∈A} a_v X_v + ξ`
/// (intercept fixed at zero). Fully determined by `config.seed`.
pub fn generate_dataset<T: Real>(config: &SimConfig) -> Result<Dataset<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n_samples;
    let partition = Partition::uniform(config.n_vars, config.cell_size)?;

    let mut active = Vec::with_capacity(config.n_active);
    let n_active_cells = config.n_active_cells();
    if n_active_cells > 0 {
        let mut cells = index::sample(&mut rng, partition.n_cells(), n_active_cells).into_vec();
        cells.sort_unstable();
        for g in cells {
            let mut slots =
                index::sample(&mut rng, config.cell_size, config.actives_per_cell).into_vec();
            slots.sort_unstable();
            active.extend(slots.into_iter().map(|s| partition.cell(g)[s]));
        }
    }

    let sd_x = config.var_x.sqrt();
    let mut data = Vec::with_capacity(n * config.n_vars);
    for _ in 0..n * config.n_vars {
        let z: f64 = StandardNormal.sample(&mut rng);
        data.push(z * sd_x);
    }
    let sd_noise = config.var_noise.sqrt();
    let mut y: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * sd_noise
        })
        .collect();
    for &v in &active {
        let col = &data[v * n..(v + 1) * n];
        for (yk, xk) in y.iter_mut().zip(col) {
            *yk += config.coef * xk;
        }
    }

    let x = Array2::from_shape_vec(
        (n, config.n_vars).f(),
        data.into_iter().map(T::lit).collect(),
    )
    .map_err(|e| CtfError::InvalidConfig(e.to_string()))?;
    let y = Array1::from_iter(y.into_iter().map(T::lit));
    Dataset::new(y, x, partition)?.with_true_active(active)
}
