//! Head-level KV-cache simulation over recorded attention traces.
//!
//! The pipeline is: load or synthesize a trace ([`trace`]), profile heads and
//! assign roles ([`profiler`]), size each compressed head's cache
//! ([`budget`]), replay decoding with drift-triggered retrieval ([`engine`])
//! and compare against baselines ([`eval`]).
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the unsuffixed
//! type names default to `f64` and the `*32` aliases below pin `f32`.

pub mod budget;
pub mod engine;
pub mod eval;
pub mod metrics;
pub mod profiler;
pub mod report;
pub mod scalar;
pub mod trace;

pub use budget::{allocate, base_length, plan_budget, BudgetConfig, BudgetError, BudgetPlan};
pub use engine::{EngineConfig, EngineError, MonitorCadence, PolicyVariant, Protection};
pub use eval::{
    compare, run_policy, run_suite, ComparisonTable, EvalError, PolicySpec, SimContext,
};
pub use metrics::{IndexSet, MetricsError};
pub use profiler::{calibrate, ProfileConfig, ProfileError, Role, TaxonomyResult};
pub use report::SimulationReport;
pub use scalar::Scalar;
pub use trace::{read_trace, write_trace, AttentionTrace, HeadId, TraceError, TraceManifest};

pub type ProfileConfig32 = ProfileConfig<f32>;
pub type TaxonomyResult32 = TaxonomyResult<f32>;
pub type BudgetConfig32 = BudgetConfig<f32>;
pub type BudgetPlan32 = BudgetPlan<f32>;
pub type EngineConfig32 = EngineConfig<f32>;
pub type SimulationReport32 = SimulationReport<f32>;
pub type ComparisonTable32 = ComparisonTable<f32>;
