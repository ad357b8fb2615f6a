//! Two-tier (device / host) cache simulation driven by an attention trace.
//!
//! Full heads (volatile, pivot) keep every position resident. Compressed heads
//! keep their top-`l_i` prefill positions plus protected positions (attention
//! sinks, the prefill recency window and everything appended during decode).
//! Pivots watch their own attention drift against a baseline set; when the
//! windowed median overlap falls below `tau_drift`, each satellite of the
//! cluster receives the pivot's current top-`l_s` positions from the host
//! reservoir after a modeled transfer delay.

mod state;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::BudgetPlan;
use crate::metrics::{normalized_overlap, IndexSet, MetricsError};
use crate::profiler::{ProfileError, TaxonomyResult};
use crate::report::SimulationReport;
use crate::scalar::{median, Scalar};
use crate::trace::{AttentionTrace, HeadId};

pub use state::{CacheState, HeadCache, PivotMonitor, StepOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyVariant {
    #[default]
    Heterocache,
    /// Uniform `round(L_base)` for every compressed head.
    NoAllocation,
    /// Never monitors drift and never retrieves.
    NoRetrieval,
}

impl PolicyVariant {
    pub fn name(self) -> &'static str {
        match self {
            PolicyVariant::Heterocache => "heterocache",
            PolicyVariant::NoAllocation => "no_allocation",
            PolicyVariant::NoRetrieval => "no_retrieval",
        }
    }
}

/// When pivots evaluate the drift trigger.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonitorCadence {
    /// Only at steps with `t mod W == 0`, over the `W` overlaps since the last boundary.
    #[default]
    WindowBoundary,
    /// At every step once `W` overlaps are buffered (rolling window).
    EveryStep,
}

/// Positions every compressed head keeps resident regardless of its budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protection {
    pub sink_tokens: usize,
    pub recency_window: usize,
}

impl Default for Protection {
    fn default() -> Self {
        Self {
            sink_tokens: 4,
            recency_window: 8,
        }
    }
}

impl Protection {
    /// Sinks, the last `recency_window` prefill positions and any decode position.
    #[inline]
    pub fn covers(&self, position: u32, prefill_len: usize) -> bool {
        let p = position as usize;
        p < self.sink_tokens || p + self.recency_window >= prefill_len
    }

    /// Protected prefill positions in ascending order.
    pub fn prefill_positions(&self, prefill_len: usize) -> IndexSet {
        let sinks = 0..self.sink_tokens.min(prefill_len);
        let recent = prefill_len.saturating_sub(self.recency_window)..prefill_len;
        sinks.chain(recent).map(|p| p as u32).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig<T = f64> {
    pub tau_drift: T,
    pub window: usize,
    /// Bytes the host link moves per decode step.
    pub transfer_bandwidth: f64,
    /// Steps between a trigger and the fetched entries becoming resident (at least 1).
    pub update_delay_steps: u32,
    pub policy_variant: PolicyVariant,
    pub cadence: MonitorCadence,
    pub protection: Protection,
}

impl<T: Scalar> Default for EngineConfig<T> {
    fn default() -> Self {
        Self {
            tau_drift: T::lit(0.5),
            window: 8,
            transfer_bandwidth: 64.0 * 1024.0 * 1024.0,
            update_delay_steps: 1,
            policy_variant: PolicyVariant::Heterocache,
            cadence: MonitorCadence::WindowBoundary,
            protection: Protection::default(),
        }
    }
}

impl<T: Scalar> EngineConfig<T> {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.window == 0 {
            return Err(EngineError::Config("window must be at least 1".into()));
        }
        if !(self.tau_drift >= T::zero() && self.tau_drift <= T::one()) {
            return Err(EngineError::Config(format!(
                "tau_drift {} outside [0,1]",
                self.tau_drift
            )));
        }
        if !(self.transfer_bandwidth > 0.0) {
            return Err(EngineError::Config(
                "transfer_bandwidth must be positive".into(),
            ));
        }
        if self.update_delay_steps == 0 {
            return Err(EngineError::Config(
                "update_delay_steps must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("invalid engine config: {0}")]
    Config(String),
    #[error("plan and taxonomy disagree: {0}")]
    Mismatch(String),
    #[error("step {got} applied out of order (expected {expected})")]
    OutOfOrder { expected: u32, got: u32 },
    #[error("unknown head {0}")]
    UnknownHead(HeadId),
    #[error("budget exceeded at step {step}: {entries} entries > ceiling {ceiling}")]
    BudgetExceeded {
        step: u32,
        entries: usize,
        ceiling: f64,
    },
    #[error("infeasible cache state: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Taxonomy(#[from] ProfileError),
}

/// Drift overlap against the pivot baseline, normalized by the baseline length.
pub fn pivot_overlap<T: Scalar>(
    current: &IndexSet,
    base: &IndexSet,
    base_len: usize,
) -> Result<T, EngineError> {
    if base.len() != base_len {
        return Err(EngineError::Metrics(MetricsError::SizeMismatch(format!(
            "baseline holds {} indices, expected {}",
            base.len(),
            base_len
        ))));
    }
    Ok(normalized_overlap(current, base, base_len)?)
}

/// `true` iff the median of exactly `window` overlaps is strictly below `tau_drift`.
pub fn drift_check<T: Scalar>(
    window_overlaps: &[T],
    window: usize,
    tau_drift: T,
) -> Result<bool, EngineError> {
    if window_overlaps.len() != window || window == 0 {
        return Err(EngineError::Config(format!(
            "drift window holds {} values, expected {}",
            window_overlaps.len(),
            window
        )));
    }
    let m = median(window_overlaps)
        .ok_or_else(|| EngineError::Config("drift window contains NaN".into()))?;
    Ok(m < tau_drift)
}

/// Prefill plus every decode step of `trace`, returning the report and the final state.
pub fn run_detailed<T: Scalar>(
    trace: &AttentionTrace,
    taxonomy: &TaxonomyResult<T>,
    plan: &BudgetPlan<T>,
    config: &EngineConfig<T>,
) -> Result<(SimulationReport<T>, CacheState<T>), EngineError> {
    let mut state = CacheState::prefill_init(trace, taxonomy, plan, config)?;
    let mut records = vec![state.prefill_record(&trace.steps[0])?];
    for step in &trace.steps[1..] {
        let outcome = state.decode_step(step, config)?;
        records.push(outcome.record);
    }
    let report = SimulationReport::new(
        config.policy_variant.name(),
        trace,
        plan.budget_ceiling,
        plan.num_comp,
        records,
        state.events().to_vec(),
    );
    Ok((report, state))
}

/// Runs the engine over the whole trace.
pub fn run<T: Scalar>(
    trace: &AttentionTrace,
    taxonomy: &TaxonomyResult<T>,
    plan: &BudgetPlan<T>,
    config: &EngineConfig<T>,
) -> Result<SimulationReport<T>, EngineError> {
    run_detailed(trace, taxonomy, plan, config).map(|(r, _)| r)
}
