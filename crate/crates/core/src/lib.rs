//! Coarse-to-fine multiple testing with family-wise error rate control.
//!
//! Indices are grouped into disjoint cells. A cell is screened first and an
//! index is declared active only if both its cell and the index itself pass
//! their thresholds. Error control accounts for the joint behavior of the two
//! stages, either through chi-square bounds ([`ctf_parametric`]) or through
//! sampled permutations ([`ctf_permutation`]). The numerical core is generic
//! over [`Real`] (`f32` or `f64`); the `*F64`/`*F32` aliases below name the
//! concrete instantiations.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod active_cells;
pub mod baselines;
pub mod ctf_parametric;
pub mod ctf_permutation;
pub mod discovery;
pub mod dist_kernels;
pub mod error;
pub mod harness;
pub mod linear_scores;
pub mod rng;
pub mod scalar;

pub use active_cells::{
    adjusted_discovery, cell_pvalue, dhat_counts, estimate_j, h_i, ActiveCellEstimate,
    AdjustConfig, AdjustRegime, AdjustedDiscovery,
};
pub use baselines::{bonferroni_reject, holm_reject, PValueVector};
pub use ctf_parametric::{
    fwer_bound, fwer_bound_varcells, optimize_thresholds, p00_bound, p0_bound, power_lower_bound,
    run_parametric_test, OptimizedThresholds, PowerTarget, TargetRule, ThresholdReport,
};
pub use ctf_permutation::{
    choose_np_thresholds, hat_t, hat_t_conditional, np_fwer_bound, run_nonparametric_test,
    sample_permutations, PermutationPlan, ScoreKind, ScoredPermutations,
};
pub use discovery::{CtfThresholds, DiscoverySet, IndexStats, Regime};
pub use error::{CtfError, Result};
pub use harness::{run_null_fwer_experiment, run_power_experiment, ExperimentSpec, PowerTable};
pub use linear_scores::{
    cell_score, generate_dataset, variable_score, Dataset, Partition, Projections, SimConfig,
};
pub use scalar::Real;

/// Version stamped into every serialized report and table.
pub const FORMAT_VERSION: u32 = 1;

pub type DatasetF64 = Dataset<f64>;
pub type DatasetF32 = Dataset<f32>;
pub type ThresholdsF64 = CtfThresholds<f64>;
pub type ThresholdsF32 = CtfThresholds<f32>;
pub type DiscoverySetF64 = DiscoverySet<f64>;
pub type DiscoverySetF32 = DiscoverySet<f32>;
pub type PowerTargetF64 = PowerTarget<f64>;
pub type PowerTargetF32 = PowerTarget<f32>;
pub type ActiveCellEstimateF64 = ActiveCellEstimate<f64>;
pub type PValueVectorF64 = PValueVector<f64>;
