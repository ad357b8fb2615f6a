//! Offline head calibration: scoring, adjacency graph, greedy star clustering
//! and the four-role taxonomy.

mod gqa;
mod graph;
mod roles;
mod scores;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::MetricsError;
use crate::scalar::Scalar;
use crate::trace::HeadId;

pub use gqa::aggregate_gqa;
pub use graph::{
    build_adjacency, build_adjacency_from_traces, greedy_star_cluster, AdjacencyGraph, Cluster,
    Clustering,
};
pub use roles::{assign_roles, HeadRecord, RoleCounts, TaxonomyResult};
pub use scores::{profile, HeadScores};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Volatile,
    Anchor,
    Pivot,
    Satellite,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Volatile, Role::Anchor, Role::Pivot, Role::Satellite];

    /// Volatile and pivot heads keep their whole cache on the GPU.
    pub fn is_full(self) -> bool {
        matches!(self, Role::Volatile | Role::Pivot)
    }

    pub fn is_compressed(self) -> bool {
        !self.is_full()
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Volatile => "volatile",
            Role::Anchor => "anchor",
            Role::Pivot => "pivot",
            Role::Satellite => "satellite",
        }
    }
}

/// How pairwise head overlap is aggregated over time for the adjacency graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "step")]
pub enum AdjacencyMode {
    /// Median over all decode steps.
    #[default]
    MedianOverSteps,
    /// A single representative step.
    SingleStep(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileConfig<T = f64> {
    pub tau_stable: T,
    pub tau_sim: T,
    /// `None` selects `min(1000, ceil(L / 10))`.
    pub profiling_topk: Option<usize>,
    /// Only applied to dense weights; sparse traces are never re-pooled.
    pub pool_kernel: usize,
    pub gqa_group_size: usize,
    pub adjacency: AdjacencyMode,
}

impl<T: Scalar> Default for ProfileConfig<T> {
    fn default() -> Self {
        Self {
            tau_stable: T::lit(0.5),
            tau_sim: T::lit(0.5),
            profiling_topk: None,
            pool_kernel: 13,
            gqa_group_size: 1,
            adjacency: AdjacencyMode::MedianOverSteps,
        }
    }
}

impl<T: Scalar> ProfileConfig<T> {
    pub fn validate(&self) -> Result<(), ProfileError> {
        let unit = |x: T| x >= T::zero() && x <= T::one();
        if !unit(self.tau_stable) || !unit(self.tau_sim) {
            return Err(ProfileError::Config(format!(
                "thresholds must lie in [0,1] (tau_stable={}, tau_sim={})",
                self.tau_stable, self.tau_sim
            )));
        }
        if self.gqa_group_size == 0 {
            return Err(ProfileError::Config(
                "gqa_group_size must be at least 1".into(),
            ));
        }
        if self.pool_kernel != 0 && self.pool_kernel % 2 == 0 {
            return Err(ProfileError::Config(format!(
                "pool_kernel must be odd or 0, got {}",
                self.pool_kernel
            )));
        }
        if self.profiling_topk == Some(0) {
            return Err(ProfileError::Config(
                "profiling_topk must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn topk_for(&self, prefill_len: usize) -> usize {
        self.profiling_topk
            .unwrap_or_else(|| crate::metrics::default_profiling_topk(prefill_len))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProfileError {
    #[error("invalid profile config: {0}")]
    Config(String),
    #[error("{query_heads} query heads cannot be split into groups of {group_size}")]
    GqaGrouping {
        query_heads: usize,
        group_size: usize,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("no calibration traces")]
    NoTraces,
    #[error("trace needs at least one decode step")]
    NoDecodeSteps,
    #[error("head {0} has no scores")]
    MissingHead(HeadId),
    #[error("invalid taxonomy: {0}")]
    Taxonomy(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Scores, adjacency, clustering and roles for a set of calibration traces.
pub fn calibrate<T: Scalar>(
    traces: &[crate::trace::AttentionTrace],
    config: &ProfileConfig<T>,
) -> Result<TaxonomyResult<T>, ProfileError> {
    let scores = profile(traces, config)?;
    let graph = build_adjacency_from_traces(traces, config)?;
    let clustering = greedy_star_cluster(&graph);
    assign_roles(&scores, &clustering, config)
}
