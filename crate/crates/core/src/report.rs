//! Simulation output shared by the cache engine and the baseline policies.

use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;
use crate::trace::{write_trace, AttentionTrace, HeadId};

/// Recall in every report is attention mass over the recorded top-K entries,
/// a proxy for downstream accuracy.
pub const RECALL_METRIC: &str = "attention_mass_recall_over_recorded_topk (accuracy proxy)";

/// Satellite indices moved from the host reservoir by one retrieval.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SatelliteFetch {
    pub satellite: HeadId,
    pub indices: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalEvent {
    pub trigger_step: u32,
    pub pivot: HeadId,
    pub cluster_id: u32,
    pub fetches: Vec<SatelliteFetch>,
    pub bytes: u64,
    /// First step at which the fetched entries are resident.
    pub completion_step: u32,
    /// Steps the completion slipped past `trigger + update_delay` because of bandwidth.
    pub exposed_steps: u32,
}

impl RetrievalEvent {
    pub fn fetched_entries(&self) -> usize {
        self.fetches.iter().map(|f| f.indices.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord<T = f64> {
    pub step: u32,
    /// Mean attention-mass recall over heads.
    pub recall: T,
    pub min_head_recall: T,
    /// Entries charged against the budget (full heads at L, compressed heads' selected sets).
    pub gpu_entries: usize,
    /// Sink and prefill-recency entries outside the selected sets.
    pub protected_entries: usize,
    /// Tokens appended during decode, over all heads.
    pub decode_entries: usize,
    pub bytes_in_flight: u64,
    pub cumulative_bytes: u64,
    pub retrieval_flag: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary<T = f64> {
    pub mean_recall: T,
    pub min_recall: T,
    /// Mean over decode steps only (excludes prefill).
    pub mean_decode_recall: T,
    pub peak_gpu_entries: usize,
    pub peak_total_entries: usize,
    pub total_bytes: u64,
    pub retrieval_events: usize,
    pub hidden_transfers: usize,
    pub exposed_transfers: usize,
    pub exposed_transfer_steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport<T = f64> {
    pub policy: String,
    pub recall_metric: String,
    pub trace_fingerprint: String,
    pub num_heads: usize,
    pub prefill_len: usize,
    pub decode_steps: usize,
    /// Budgeted entries allowed (`rho * N * L`; `N * L` for the uncompressed oracle).
    pub budget_ceiling: T,
    /// Integer rounding slack allowed on top of the ceiling.
    pub budget_slack: usize,
    pub steps: Vec<StepRecord<T>>,
    pub events: Vec<RetrievalEvent>,
    pub summary: Summary<T>,
}

impl<T: Scalar> SimulationReport<T> {
    pub fn new(
        policy: impl Into<String>,
        trace: &AttentionTrace,
        budget_ceiling: T,
        budget_slack: usize,
        steps: Vec<StepRecord<T>>,
        events: Vec<RetrievalEvent>,
    ) -> Self {
        let summary = summarize(&steps, &events);
        Self {
            policy: policy.into(),
            recall_metric: RECALL_METRIC.to_string(),
            trace_fingerprint: trace_fingerprint(trace),
            num_heads: trace.manifest.num_heads(),
            prefill_len: trace.manifest.prefill_len as usize,
            decode_steps: trace.manifest.decode_steps as usize,
            budget_ceiling,
            budget_slack,
            steps,
            events,
            summary,
        }
    }

    /// Mean recall over steps `from..=to` (clamped to the recorded range).
    pub fn mean_recall_between(&self, from: u32, to: u32) -> Option<T> {
        let sel: Vec<T> = self
            .steps
            .iter()
            .filter(|s| s.step >= from && s.step <= to)
            .map(|s| s.recall)
            .collect();
        (!sel.is_empty()).then(|| sel.iter().copied().sum::<T>() / T::from_count(sel.len()))
    }

    /// Per-step CSV with columns
    /// `step,policy,recall,gpu_entries,bytes_in_flight,retrieval_flag,protected_entries,decode_entries,cumulative_bytes`.
    pub fn write_steps_csv<W: Write>(&self, sink: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record([
            "step",
            "policy",
            "recall",
            "gpu_entries",
            "bytes_in_flight",
            "retrieval_flag",
            "protected_entries",
            "decode_entries",
            "cumulative_bytes",
        ])?;
        for s in &self.steps {
            w.write_record([
                s.step.to_string(),
                self.policy.clone(),
                format!("{}", s.recall),
                s.gpu_entries.to_string(),
                s.bytes_in_flight.to_string(),
                u8::from(s.retrieval_flag).to_string(),
                s.protected_entries.to_string(),
                s.decode_entries.to_string(),
                s.cumulative_bytes.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn summarize<T: Scalar>(steps: &[StepRecord<T>], events: &[RetrievalEvent]) -> Summary<T> {
    if steps.is_empty() {
        return Summary::default();
    }
    let mean = |xs: &[&StepRecord<T>]| {
        if xs.is_empty() {
            T::zero()
        } else {
            xs.iter().map(|s| s.recall).sum::<T>() / T::from_count(xs.len())
        }
    };
    let all: Vec<&StepRecord<T>> = steps.iter().collect();
    let decode: Vec<&StepRecord<T>> = steps.iter().filter(|s| s.step > 0).collect();
    Summary {
        mean_recall: mean(&all),
        min_recall: steps.iter().map(|s| s.recall).fold(T::one(), T::min),
        mean_decode_recall: if decode.is_empty() {
            mean(&all)
        } else {
            mean(&decode)
        },
        peak_gpu_entries: steps.iter().map(|s| s.gpu_entries).max().unwrap_or(0),
        peak_total_entries: steps
            .iter()
            .map(|s| s.gpu_entries + s.protected_entries + s.decode_entries)
            .max()
            .unwrap_or(0),
        total_bytes: events.iter().map(|e| e.bytes).sum(),
        retrieval_events: events.len(),
        hidden_transfers: events.iter().filter(|e| e.exposed_steps == 0).count(),
        exposed_transfers: events.iter().filter(|e| e.exposed_steps > 0).count(),
        exposed_transfer_steps: events.iter().map(|e| e.exposed_steps as u64).sum(),
    }
}

/// Short content hash of the encoded trace.
pub fn trace_fingerprint(trace: &AttentionTrace) -> String {
    struct HashSink(Sha256);
    impl Write for HashSink {
        fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
            self.0.update(buf);
            Ok(buf.len())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }
    let mut sink = HashSink(Sha256::new());
    if write_trace(trace, &mut sink).is_err() {
        return "invalid-trace".to_string();
    }
    sink.0
        .finalize()
        .iter()
        .take(8)
        .map(|b| format!("{:02x}", b))
        .collect()
}
