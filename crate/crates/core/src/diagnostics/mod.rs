//! Representation and trust-region diagnostics.
//!
//! Everything here is a pure function of immutable snapshots (feature
//! matrices, distribution parameters, ratio arrays, metric series), except
//! the capacity fit which owns its private copy of a checkpoint.
//!
//! [`DiagnosticsRecord`] is the JSON Lines schema written by the trainer.

mod capacity;
mod rank;
mod series;
mod stats;

pub use capacity::{capacity_loss, probe_loss, CapacityBudget, CapacityHead, CapacityProbe};
pub use rank::{
    rank_report, rank_report_from_singular_values, singular_values, singular_values_with, symmetric_eigenvalues,
    RankReport, FEATURE_RANK_DELTA, RANK_DELTA,
};
pub use series::{
    average_ranks, ewma_smooth, kendall_tau, normalized_l2, pair_correlation, pearson, rank_correlations, spearman,
    window_aggregate, CorrelationSummary, PairCorrelation, WindowMode, EWMA_COEFF, MIN_NONTRIVIAL, WINDOW_FRAC,
};
pub use stats::{
    dead_neurons, excess_ratio, feature_stats, policy_variance_across_states, ratio_stats, FeatureStats, RatioStats,
    RATIO_CLAMP, TANH_DEAD_STD,
};

use serde::{Deserialize, Serialize};

use crate::autodiff::Activation;
use crate::error::Result;
use crate::networks::FeatureProbe;

/// Penultimate-layer statistics of one network on one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationStats {
    pub dead_neurons: usize,
    pub preactivation_norm: f64,
    pub feature_norm: f64,
    pub rank: RankReport,
}

pub fn representation_stats(
    probe: &FeatureProbe,
    activation: Activation,
    delta: f64,
    feature_rank_delta: f64,
) -> Result<RepresentationStats> {
    let features = probe.features();
    let fs = feature_stats(probe.penultimate_preacts(), features)?;
    Ok(RepresentationStats {
        dead_neurons: dead_neurons(features, activation)?,
        preactivation_norm: fs.preactivation_norm,
        feature_norm: fs.feature_norm,
        rank: rank_report(features, delta, feature_rank_delta)?,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    /// Mean over minibatches of the clipped surrogate (to maximize).
    pub policy_objective: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub pfo_loss: f64,
    pub total_loss: f64,
    /// Mean pre-clip global gradient norm.
    pub grad_norm: f64,
}

/// One line of `metrics.jsonl`.
///
/// * `step`: environment steps collected so far, across all environments
/// * `batch`: zero-based rollout index
/// * `episode_return_*`: undiscounted, unmasked returns of episodes that
///   finished during this rollout (absent when none did)
/// * `entropy`, `policy_variance`: of π_old on the rollout batch
/// * `actor`, `critic`: penultimate statistics on the rollout batch
/// * `ratio`: π_θ / π_old on the whole batch after the epochs
/// * `capacity_actor`, `capacity_critic`: present on capacity ticks
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub step: u64,
    pub batch: u64,
    pub episodes: usize,
    pub episode_return_mean: Option<f64>,
    pub episode_return_min: Option<f64>,
    pub episode_return_max: Option<f64>,
    pub entropy: f64,
    pub policy_variance: f64,
    pub actor: RepresentationStats,
    pub critic: RepresentationStats,
    pub ratio: RatioStats,
    pub losses: LossStats,
    pub capacity_actor: Option<f64>,
    pub capacity_critic: Option<f64>,
    pub diverged: bool,
}
