use std::io::Write;

use serde::{Deserialize, Serialize};

use super::policy::ceilings_match;
use super::EvalError;
use crate::report::{SimulationReport, RECALL_METRIC};
use crate::scalar::Scalar;

const ORACLE: &str = "full_oracle";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyRow<T = f64> {
    pub policy: String,
    pub budget_ceiling: T,
    pub mean_recall: T,
    pub min_recall: T,
    pub mean_decode_recall: T,
    pub peak_gpu_entries: usize,
    pub total_bytes: u64,
    pub retrieval_events: usize,
    pub exposed_transfer_steps: u64,
}

/// `a - b` for every aggregate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDelta<T = f64> {
    pub a: String,
    pub b: String,
    pub mean_recall_delta: T,
    pub mean_decode_recall_delta: T,
    pub min_recall_delta: T,
    pub peak_gpu_entries_delta: i64,
    pub total_bytes_delta: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable<T = f64> {
    pub trace_fingerprint: String,
    pub recall_metric: String,
    pub rows: Vec<PolicyRow<T>>,
    pub deltas: Vec<PairDelta<T>>,
}

/// Aligns reports over the same trace and computes pairwise deltas.
///
/// Rows are sorted by policy name (stable for duplicates); deltas cover every
/// pair `(i, j)` with `i < j` in that order.
pub fn compare<T: Scalar>(
    reports: &[SimulationReport<T>],
) -> Result<ComparisonTable<T>, EvalError> {
    if reports.len() < 2 {
        return Err(EvalError::TooFewReports);
    }
    let fp = &reports[0].trace_fingerprint;
    if let Some(r) = reports.iter().find(|r| &r.trace_fingerprint != fp) {
        return Err(EvalError::TraceMismatch(format!(
            "{} vs {} ({})",
            fp, r.trace_fingerprint, r.policy
        )));
    }
    let budgeted: Vec<&SimulationReport<T>> =
        reports.iter().filter(|r| r.policy != ORACLE).collect();
    if let Some(first) = budgeted.first() {
        if let Some(r) = budgeted
            .iter()
            .find(|r| !ceilings_match(r.budget_ceiling, first.budget_ceiling))
        {
            return Err(EvalError::BudgetMismatch(format!(
                "{} has ceiling {}, {} has {}",
                first.policy, first.budget_ceiling, r.policy, r.budget_ceiling
            )));
        }
    }

    let mut rows: Vec<PolicyRow<T>> = reports
        .iter()
        .map(|r| PolicyRow {
            policy: r.policy.clone(),
            budget_ceiling: r.budget_ceiling,
            mean_recall: r.summary.mean_recall,
            min_recall: r.summary.min_recall,
            mean_decode_recall: r.summary.mean_decode_recall,
            peak_gpu_entries: r.summary.peak_gpu_entries,
            total_bytes: r.summary.total_bytes,
            retrieval_events: r.summary.retrieval_events,
            exposed_transfer_steps: r.summary.exposed_transfer_steps,
        })
        .collect();
    rows.sort_by(|a, b| a.policy.cmp(&b.policy));

    let mut deltas = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let (a, b) = (&rows[i], &rows[j]);
            deltas.push(PairDelta {
                a: a.policy.clone(),
                b: b.policy.clone(),
                mean_recall_delta: a.mean_recall - b.mean_recall,
                mean_decode_recall_delta: a.mean_decode_recall - b.mean_decode_recall,
                min_recall_delta: a.min_recall - b.min_recall,
                peak_gpu_entries_delta: a.peak_gpu_entries as i64 - b.peak_gpu_entries as i64,
                total_bytes_delta: a.total_bytes as i64 - b.total_bytes as i64,
            });
        }
    }
    Ok(ComparisonTable {
        trace_fingerprint: fp.clone(),
        recall_metric: RECALL_METRIC.to_string(),
        rows,
        deltas,
    })
}

impl<T: Scalar> ComparisonTable<T> {
    pub fn row(&self, policy: &str) -> Option<&PolicyRow<T>> {
        self.rows.iter().find(|r| r.policy == policy)
    }

    /// Columns: `policy,budget_ceiling,mean_recall,min_recall,mean_decode_recall,
    /// peak_gpu_entries,total_bytes,retrieval_events,exposed_transfer_steps`.
    pub fn write_rows_csv<W: Write>(&self, sink: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record([
            "policy",
            "budget_ceiling",
            "mean_recall",
            "min_recall",
            "mean_decode_recall",
            "peak_gpu_entries",
            "total_bytes",
            "retrieval_events",
            "exposed_transfer_steps",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.policy.clone(),
                r.budget_ceiling.to_string(),
                r.mean_recall.to_string(),
                r.min_recall.to_string(),
                r.mean_decode_recall.to_string(),
                r.peak_gpu_entries.to_string(),
                r.total_bytes.to_string(),
                r.retrieval_events.to_string(),
                r.exposed_transfer_steps.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Columns: `a,b,mean_recall_delta,mean_decode_recall_delta,min_recall_delta,
    /// peak_gpu_entries_delta,total_bytes_delta`.
    pub fn write_deltas_csv<W: Write>(&self, sink: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record([
            "a",
            "b",
            "mean_recall_delta",
            "mean_decode_recall_delta",
            "min_recall_delta",
            "peak_gpu_entries_delta",
            "total_bytes_delta",
        ])?;
        for d in &self.deltas {
            w.write_record([
                d.a.clone(),
                d.b.clone(),
                d.mean_recall_delta.to_string(),
                d.mean_decode_recall_delta.to_string(),
                d.min_recall_delta.to_string(),
                d.peak_gpu_entries_delta.to_string(),
                d.total_bytes_delta.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
