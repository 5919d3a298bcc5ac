//! Bonferroni and Holm step-down baselines.

use serde::{Deserialize, Serialize};

use crate::dist_kernels::chi2_sf;
use crate::error::{CtfError, Result};
use crate::linear_scores::Projections;
use crate::scalar::Real;

/// One p-value per variable, indexed by variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct PValueVector<T> {
    values: Vec<T>,
}

impl<T: Real> PValueVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if let Some(i) = values
            .iter()
            .position(|p| !(*p >= T::zero() && *p <= T::one()))
        {
            return Err(CtfError::InvalidConfig(format!(
                "p-value {} at index {i} outside [0, 1]",
                values[i]
            )));
        }
        Ok(Self { values })
    }

    /// Missing entries (e.g. constant columns) become 1 and still count
    /// toward the multiplicity.
    pub fn from_options(values: Vec<Option<T>>) -> Result<Self> {
        Self::new(
            values
                .into_iter()
                .map(|p| p.unwrap_or_else(T::one))
                .collect(),
        )
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn check_alpha<T: Real>(alpha: T) -> Result<()> {
    if alpha > T::zero() && alpha <= T::one() {
        Ok(())
    } else {
        Err(CtfError::InvalidConfig(format!(
            "alpha = {alpha} must lie in (0, 1]"
        )))
    }
}

/// `{v : p_v ≤ α/|V|}`, ascending.
pub fn bonferroni_reject<T: Real>(pvalues: &PValueVector<T>, alpha: T) -> Result<Vec<usize>> {
    check_alpha(alpha)?;
    let cutoff = alpha / T::from_count(pvalues.len().max(1));
    Ok((0..pvalues.len())
        .filter(|&v| pvalues.values[v] <= cutoff)
        .collect())
}

/// Holm's step-down procedure; returns the rejected indices ascending.
pub fn holm_reject<T: Real>(pvalues: &PValueVector<T>, alpha: T) -> Result<Vec<usize>> {
    check_alpha(alpha)?;
    let m = pvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        pvalues.values[a]
            .partial_cmp(&pvalues.values[b])
            .expect("validated p-values")
            .then(a.cmp(&b))
    });
    let mut rejected = Vec::new();
    for (i, &v) in order.iter().enumerate() {
        if pvalues.values[v] <= alpha / T::from_count(m - i) {
            rejected.push(v);
        } else {
            break;
        }
    }
    rejected.sort_unstable();
    Ok(rejected)
}

/// `p_v = 1 − F_1(T_v)`; `None` for constant columns.
pub fn parametric_pvalues<T: Real>(proj: &Projections<T>) -> Result<Vec<Option<T>>> {
    let n_vars = proj.var_directions().ncols();
    (0..n_vars)
        .map(|v| match proj.variable_score(v) {
            Ok(s) => chi2_sf(s, 1).map(Some),
            Err(_) => Ok(None),
        })
        .collect()
}
