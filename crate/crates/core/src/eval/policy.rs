use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{attention_recall_by, EvalError};
use crate::budget::BudgetPlan;
use crate::engine::{self, EngineConfig, PolicyVariant};
use crate::metrics::{top_k_sparse, IndexSet};
use crate::profiler::TaxonomyResult;
use crate::report::{SimulationReport, StepRecord};
use crate::scalar::Scalar;
use crate::trace::AttentionTrace;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum PolicySpec<T = f64> {
    /// Everything resident; the recall upper bound.
    FullOracle,
    /// Each head keeps its prefill top-`floor(budget_fraction * L)` forever.
    StaticTopk {
        budget_fraction: T,
    },
    /// First `sink_tokens` positions plus a rolling window of the latest `window`.
    SinkWindow {
        sink_tokens: usize,
        window: usize,
    },
    Heterocache {
        variant: PolicyVariant,
    },
}

impl<T: Scalar> PolicySpec<T> {
    pub fn label(&self) -> String {
        match self {
            PolicySpec::FullOracle => "full_oracle".into(),
            PolicySpec::StaticTopk { .. } => "static_topk".into(),
            PolicySpec::SinkWindow { .. } => "sink_window".into(),
            PolicySpec::Heterocache { variant } => variant.name().into(),
        }
    }

    /// Sink-window policy with the same total budget as `rho` over `prefill_len`.
    pub fn sink_window_matching(rho: T, prefill_len: usize, sink_tokens: usize) -> Self {
        let per_head = (rho * T::from_count(prefill_len))
            .floor()
            .to_usize()
            .unwrap_or(0);
        PolicySpec::SinkWindow {
            sink_tokens,
            window: per_head.saturating_sub(sink_tokens),
        }
    }

    /// Parses a policy name; budget-carrying baselines take `rho` for their budget.
    pub fn from_name(
        name: &str,
        rho: T,
        prefill_len: usize,
        sink_tokens: usize,
    ) -> Result<Self, EvalError> {
        Ok(match name {
            "full_oracle" => PolicySpec::FullOracle,
            "static_topk" => PolicySpec::StaticTopk {
                budget_fraction: rho,
            },
            "sink_window" => Self::sink_window_matching(rho, prefill_len, sink_tokens),
            "heterocache" => PolicySpec::Heterocache {
                variant: PolicyVariant::Heterocache,
            },
            "no_allocation" => PolicySpec::Heterocache {
                variant: PolicyVariant::NoAllocation,
            },
            "no_retrieval" => PolicySpec::Heterocache {
                variant: PolicyVariant::NoRetrieval,
            },
            other => return Err(EvalError::Policy(format!("unknown policy '{}'", other))),
        })
    }

    fn validate(&self, prefill_len: usize) -> Result<(), EvalError> {
        match self {
            PolicySpec::StaticTopk { budget_fraction } => {
                if !(*budget_fraction > T::zero() && *budget_fraction <= T::one()) {
                    return Err(EvalError::Policy(format!(
                        "budget fraction {} outside (0,1]",
                        budget_fraction
                    )));
                }
            }
            PolicySpec::SinkWindow {
                sink_tokens,
                window,
            } => {
                if sink_tokens + window > prefill_len {
                    return Err(EvalError::Policy(format!(
                        "sink {} + window {} exceeds prefill length {}",
                        sink_tokens, window, prefill_len
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Budget ceiling in entries; `None` for the uncompressed oracle.
    pub fn budget_ceiling(
        &self,
        ctx: &SimContext<'_, T>,
        num_heads: usize,
        prefill_len: usize,
    ) -> Option<T> {
        match self {
            PolicySpec::FullOracle => None,
            PolicySpec::StaticTopk { budget_fraction } => {
                Some(*budget_fraction * T::from_count(num_heads) * T::from_count(prefill_len))
            }
            PolicySpec::SinkWindow {
                sink_tokens,
                window,
            } => Some(T::from_count(num_heads * (sink_tokens + window))),
            PolicySpec::Heterocache { .. } => Some(ctx.plan.budget_ceiling),
        }
    }
}

/// Calibration results and engine settings shared by every policy on a trace.
#[derive(Clone, Copy, Debug)]
pub struct SimContext<'a, T = f64> {
    pub taxonomy: &'a TaxonomyResult<T>,
    pub plan: &'a BudgetPlan<T>,
    pub engine: &'a EngineConfig<T>,
}

fn mean_min<T: Scalar>(values: &[T]) -> (T, T) {
    let mean = values.iter().copied().sum::<T>() / T::from_count(values.len());
    (mean, values.iter().copied().fold(T::one(), T::min))
}

fn static_topk<T: Scalar>(
    trace: &AttentionTrace,
    fraction: T,
    ctx: &SimContext<'_, T>,
) -> Vec<StepRecord<T>> {
    let m = &trace.manifest;
    let l = m.prefill_len as usize;
    let per_head = (fraction * T::from_count(l))
        .floor()
        .to_usize()
        .unwrap_or(0);
    let protection = ctx.engine.protection;
    let protected_prefill = protection.prefill_positions(l);
    let selected: Vec<IndexSet> = m
        .heads()
        .map(|h| {
            if per_head == 0 {
                IndexSet::new()
            } else {
                top_k_sparse(trace.head_entries(0, h), per_head)
            }
        })
        .collect();
    let gpu_entries: usize = selected.iter().map(IndexSet::len).sum();
    let protected_entries: usize = selected
        .iter()
        .map(|s| protected_prefill.len() - protected_prefill.intersection_len(s))
        .sum();

    trace
        .steps
        .iter()
        .map(|step| {
            let recalls: Vec<T> = m
                .heads()
                .zip(&selected)
                .map(|(h, sel)| {
                    attention_recall_by(
                        |p| protection.covers(p, l) || sel.contains(p),
                        step.head(m, h),
                    )
                    .unwrap_or_else(|_| T::one())
                })
                .collect();
            let (recall, min_head_recall) = mean_min(&recalls);
            StepRecord {
                step: step.step_index,
                recall,
                min_head_recall,
                gpu_entries,
                protected_entries,
                decode_entries: m.num_heads() * step.step_index as usize,
                bytes_in_flight: 0,
                cumulative_bytes: 0,
                retrieval_flag: false,
            }
        })
        .collect()
}

fn sink_window<T: Scalar>(
    trace: &AttentionTrace,
    sinks: usize,
    window: usize,
) -> Vec<StepRecord<T>> {
    let m = &trace.manifest;
    trace
        .steps
        .iter()
        .map(|step| {
            let seq_len = m.seq_len_at(step.step_index) as usize;
            let recent_from = seq_len.saturating_sub(window);
            let resident = |p: u32| (p as usize) < sinks || (p as usize) >= recent_from;
            let recalls: Vec<T> = m
                .heads()
                .map(|h| {
                    attention_recall_by(resident, step.head(m, h)).unwrap_or_else(|_| T::one())
                })
                .collect();
            let (recall, min_head_recall) = mean_min(&recalls);
            let per_head = sinks.min(seq_len) + (seq_len - recent_from.max(sinks.min(seq_len)));
            StepRecord {
                step: step.step_index,
                recall,
                min_head_recall,
                gpu_entries: per_head * m.num_heads(),
                protected_entries: 0,
                decode_entries: 0,
                bytes_in_flight: 0,
                cumulative_bytes: 0,
                retrieval_flag: false,
            }
        })
        .collect()
}

fn full_oracle<T: Scalar>(trace: &AttentionTrace) -> Vec<StepRecord<T>> {
    let m = &trace.manifest;
    trace
        .steps
        .iter()
        .map(|step| StepRecord {
            step: step.step_index,
            recall: T::one(),
            min_head_recall: T::one(),
            gpu_entries: m.num_heads() * m.prefill_len as usize,
            protected_entries: 0,
            decode_entries: m.num_heads() * step.step_index as usize,
            bytes_in_flight: 0,
            cumulative_bytes: 0,
            retrieval_flag: false,
        })
        .collect()
}

/// Simulates one policy over `trace`.
pub fn run_policy<T: Scalar>(
    trace: &AttentionTrace,
    policy: &PolicySpec<T>,
    ctx: &SimContext<'_, T>,
) -> Result<SimulationReport<T>, EvalError> {
    let l = trace.manifest.prefill_len as usize;
    let n = trace.manifest.num_heads();
    policy.validate(l)?;
    let label = policy.label();
    Ok(match policy {
        PolicySpec::FullOracle => SimulationReport::new(
            label,
            trace,
            T::from_count(n * l),
            0,
            full_oracle(trace),
            Vec::new(),
        ),
        PolicySpec::StaticTopk { budget_fraction } => SimulationReport::new(
            label,
            trace,
            policy.budget_ceiling(ctx, n, l).expect("budgeted"),
            0,
            static_topk(trace, *budget_fraction, ctx),
            Vec::new(),
        ),
        PolicySpec::SinkWindow {
            sink_tokens,
            window,
        } => SimulationReport::new(
            label,
            trace,
            policy.budget_ceiling(ctx, n, l).expect("budgeted"),
            0,
            sink_window(trace, *sink_tokens, *window),
            Vec::new(),
        ),
        PolicySpec::Heterocache { variant } => {
            let config = EngineConfig {
                policy_variant: *variant,
                ..ctx.engine.clone()
            };
            engine::run(trace, ctx.taxonomy, ctx.plan, &config)?
        }
    })
}

/// Runs several policies on one trace after checking they share a budget
/// ceiling (the oracle is exempt). Reports come back in input order.
pub fn run_suite<T: Scalar>(
    trace: &AttentionTrace,
    policies: &[PolicySpec<T>],
    ctx: &SimContext<'_, T>,
) -> Result<Vec<SimulationReport<T>>, EvalError> {
    let l = trace.manifest.prefill_len as usize;
    let n = trace.manifest.num_heads();
    let mut reference: Option<(String, T)> = None;
    for p in policies {
        if let Some(c) = p.budget_ceiling(ctx, n, l) {
            match &reference {
                None => reference = Some((p.label(), c)),
                Some((name, r)) if !ceilings_match(*r, c) => {
                    return Err(EvalError::BudgetMismatch(format!(
                        "{} has ceiling {}, {} has {}",
                        name,
                        r,
                        p.label(),
                        c
                    )))
                }
                _ => {}
            }
        }
    }
    policies
        .par_iter()
        .map(|p| run_policy(trace, p, ctx))
        .collect()
}

pub(crate) fn ceilings_match<T: Scalar>(a: T, b: T) -> bool {
    let scale = a.abs().max(b.abs()).max(T::one());
    (a - b).abs() <= scale * T::lit(1e-9)
}
