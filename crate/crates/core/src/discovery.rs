//! Decision constants and discovery sets shared by both regimes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CtfError, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Parametric,
    Nonparametric,
}

/// Thresholds of a coarse-to-fine test.
///
/// Parametric thresholds live on the score scale and reject for large
/// scores. Non-parametric thresholds are probabilities and reject for small
/// permutation statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct CtfThresholds<T> {
    pub theta_g: T,
    pub theta_v: T,
    pub theta_v_prime: Option<T>,
    pub epsilon_g: Option<T>,
    pub regime: Regime,
}

impl<T: Real> CtfThresholds<T> {
    /// Score-scale thresholds. Any non-negative value, including `+∞`, is
    /// accepted so that degenerate rules can be expressed; the optimizer
    /// only ever returns `θ_G > θ_V > 0`.
    pub fn parametric(theta_g: T, theta_v: T) -> Result<Self> {
        for (name, t) in [("theta_g", theta_g), ("theta_v", theta_v)] {
            if t.is_nan() || t < T::zero() {
                return Err(CtfError::InvalidConfig(format!(
                    "{name} = {t} must be >= 0"
                )));
            }
        }
        Ok(Self {
            theta_g,
            theta_v,
            theta_v_prime: None,
            epsilon_g: None,
            regime: Regime::Parametric,
        })
    }

    /// Probability-scale thresholds; each must lie in `[0, 1]`.
    pub fn nonparametric(theta_g: T, theta_v: T, theta_v_prime: T, epsilon_g: T) -> Result<Self> {
        for (name, t) in [
            ("theta_g", theta_g),
            ("theta_v", theta_v),
            ("theta_v_prime", theta_v_prime),
            ("epsilon_g", epsilon_g),
        ] {
            if !(t >= T::zero() && t <= T::one()) {
                return Err(CtfError::InvalidConfig(format!(
                    "{name} = {t} must lie in [0, 1]"
                )));
            }
        }
        Ok(Self {
            theta_g,
            theta_v,
            theta_v_prime: Some(theta_v_prime),
            epsilon_g: Some(epsilon_g),
            regime: Regime::Nonparametric,
        })
    }

    /// Re-checks the range constraints, e.g. after deserialization.
    pub fn validate(&self) -> Result<()> {
        match self.regime {
            Regime::Parametric => Self::parametric(self.theta_g, self.theta_v).map(|_| ()),
            Regime::Nonparametric => {
                let (Some(vp), Some(eps)) = (self.theta_v_prime, self.epsilon_g) else {
                    return Err(CtfError::InvalidConfig(
                        "nonparametric thresholds need theta_v_prime and epsilon_g".into(),
                    ));
                };
                Self::nonparametric(self.theta_g, self.theta_v, vp, eps).map(|_| ())
            }
        }
    }

    /// The joint rejection rule of the regime.
    pub fn rejects(&self, stats: &IndexStats<T>) -> bool {
        match self.regime {
            Regime::Parametric => stats.cell_stat > self.theta_g && stats.index_stat > self.theta_v,
            Regime::Nonparametric => {
                let (Some(vp), Some(marginal)) = (self.theta_v_prime, stats.marginal_stat) else {
                    return false;
                };
                stats.cell_stat <= self.theta_g
                    && stats.index_stat <= self.theta_v
                    && marginal <= vp
            }
        }
    }

    pub fn cell_passes(&self, cell_stat: T) -> bool {
        match self.regime {
            Regime::Parametric => cell_stat > self.theta_g,
            Regime::Nonparametric => cell_stat <= self.theta_g,
        }
    }
}

/// Statistics recorded for one index.
///
/// Parametric: `cell_stat = T_g`, `index_stat = T_v`. Non-parametric:
/// `cell_stat = T̂_g`, `index_stat` is the conditional statistic and
/// `marginal_stat = T̂_v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct IndexStats<T> {
    pub cell: usize,
    pub cell_stat: T,
    pub index_stat: T,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marginal_stat: Option<T>,
}

/// A cell left out of stage one, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub cell: usize,
    pub reason: String,
}

/// Indices declared active together with their statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct DiscoverySet<T> {
    pub detected: Vec<usize>,
    /// Every index of every cell that passed stage one.
    pub per_index: BTreeMap<usize, IndexStats<T>>,
    pub thresholds: CtfThresholds<T>,
    pub fwer_bound_value: Option<T>,
    #[serde(default)]
    pub skipped_cells: Vec<SkippedCell>,
}

impl<T: Real> DiscoverySet<T> {
    /// Builds the set from recorded statistics; `detected` is derived.
    pub fn from_stats(
        thresholds: CtfThresholds<T>,
        per_index: BTreeMap<usize, IndexStats<T>>,
        skipped_cells: Vec<SkippedCell>,
    ) -> Self {
        let detected = per_index
            .iter()
            .filter(|(_, s)| thresholds.rejects(s))
            .map(|(&v, _)| v)
            .collect();
        Self {
            detected,
            per_index,
            thresholds,
            fwer_bound_value: None,
            skipped_cells,
        }
    }

    pub fn with_fwer_bound(mut self, value: T) -> Self {
        self.fwer_bound_value = Some(value);
        self
    }

    pub fn contains(&self, v: usize) -> bool {
        self.detected.binary_search(&v).is_ok()
    }

    pub fn len(&self) -> usize {
        self.detected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detected.is_empty()
    }

    /// Checks that `detected` is exactly the set of recorded indices that
    /// satisfy the rejection rule of `thresholds`.
    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        let expected: Vec<usize> = self
            .per_index
            .iter()
            .filter(|(_, s)| self.thresholds.rejects(s))
            .map(|(&v, _)| v)
            .collect();
        if expected != self.detected {
            return Err(CtfError::InvalidConfig(format!(
                "detected set {:?} disagrees with the rejection rule ({:?})",
                self.detected, expected
            )));
        }
        Ok(())
    }
}
