//! Baseline policies, attention-mass recall and cross-policy comparison.

mod compare;
mod policy;

use thiserror::Error;

use crate::budget::BudgetError;
use crate::engine::EngineError;
use crate::metrics::IndexSet;
use crate::scalar::Scalar;
use crate::trace::Entry;

pub use compare::{compare, ComparisonTable, PairDelta, PolicyRow};
pub use policy::{run_policy, run_suite, PolicySpec, SimContext};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("recorded attention mass is zero")]
    ZeroMass,
    #[error("negative or non-finite score {0}")]
    BadScore(f32),
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error("budget mismatch: {0}")]
    BudgetMismatch(String),
    #[error("reports cover different traces: {0}")]
    TraceMismatch(String),
    #[error("comparison needs at least two reports")]
    TooFewReports,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Budget(#[from] BudgetError),
}

/// Recorded mass on positions where `is_cached` holds, over all recorded mass.
pub fn attention_recall_by<T: Scalar>(
    is_cached: impl Fn(u32) -> bool,
    entries: &[Entry],
) -> Result<T, EvalError> {
    let mut total = 0.0f64;
    let mut hit = 0.0f64;
    for e in entries.iter().filter(|e| !e.is_padding()) {
        if !(e.score >= 0.0) || !e.score.is_finite() {
            return Err(EvalError::BadScore(e.score));
        }
        total += e.score as f64;
        if is_cached(e.index) {
            hit += e.score as f64;
        }
    }
    if total <= 0.0 {
        return Err(EvalError::ZeroMass);
    }
    Ok(T::lit((hit / total).min(1.0)))
}

/// [`attention_recall_by`] against an explicit cached set.
pub fn attention_recall<T: Scalar>(cached: &IndexSet, entries: &[Entry]) -> Result<T, EvalError> {
    attention_recall_by(|p| cached.contains(p), entries)
}
