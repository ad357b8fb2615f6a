//! Attention traces: per-step top-K (token index, score) records for every KV head.
//!
//! A trace holds one prefill record (step 0) followed by `decode_steps` decode
//! records. Every head contributes exactly `trace_topk` entries per step, sorted by
//! score descending; unused slots are filled with [`PADDING_INDEX`] / `0.0`.

mod format;
mod synth;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use format::{read_trace, write_trace, MAGIC};
pub use synth::{
    generate_synthetic, ClusterSpec, DriftEvent, GroundTruth, HeadArchetype, SynthSpec,
};

/// Token index stored in unused (padding) slots.
pub const PADDING_INDEX: u32 = u32::MAX;

/// A KV head addressed by `(layer, head)`. Orders lexicographically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: u32,
    pub head: u32,
}

impl HeadId {
    pub fn new(layer: u32, head: u32) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

/// One recorded `(token_index, score)` pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub index: u32,
    pub score: f32,
}

impl Entry {
    pub const PADDING: Entry = Entry {
        index: PADDING_INDEX,
        score: 0.0,
    };

    pub fn new(index: u32, score: f32) -> Self {
        Self { index, score }
    }

    #[inline]
    pub fn is_padding(&self) -> bool {
        self.index == PADDING_INDEX
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceManifest {
    pub model_name: String,
    pub num_layers: u32,
    /// KV heads per layer, after grouped-query aggregation.
    pub heads_per_layer: u32,
    pub prefill_len: u32,
    pub decode_steps: u32,
    pub trace_topk: u32,
    /// Smoothing kernel applied at export time; 0 means none.
    pub pool_kernel_used: u32,
    /// Memory-accounting constant per cached token per head.
    pub bytes_per_kv_entry: u32,
}

impl TraceManifest {
    pub fn num_heads(&self) -> usize {
        self.num_layers as usize * self.heads_per_layer as usize
    }

    /// Number of `(index, score)` records in one step block.
    pub fn entries_per_step(&self) -> usize {
        self.num_heads() * self.trace_topk as usize
    }

    /// Sequence length visible at `step` (prefill is step 0).
    pub fn seq_len_at(&self, step: u32) -> u64 {
        self.prefill_len as u64 + step as u64
    }

    /// All heads in `(layer, head)` order.
    pub fn heads(&self) -> impl Iterator<Item = HeadId> + '_ {
        (0..self.num_layers)
            .flat_map(move |l| (0..self.heads_per_layer).map(move |h| HeadId::new(l, h)))
    }

    pub fn head_slot(&self, id: HeadId) -> Option<usize> {
        (id.layer < self.num_layers && id.head < self.heads_per_layer)
            .then(|| id.layer as usize * self.heads_per_layer as usize + id.head as usize)
    }

    pub fn validate(&self) -> Result<(), InvariantViolation> {
        let fail = |msg: String| Err(InvariantViolation(msg));
        if self.num_layers == 0 || self.heads_per_layer == 0 {
            return fail("num_layers and heads_per_layer must be at least 1".into());
        }
        if self.prefill_len == 0 {
            return fail("prefill_len must be at least 1".into());
        }
        if self.trace_topk == 0 {
            return fail("trace_topk must be at least 1".into());
        }
        if self.trace_topk as u64 > self.prefill_len as u64 + self.decode_steps as u64 {
            return fail(format!(
                "trace_topk {} exceeds prefill_len + decode_steps = {}",
                self.trace_topk,
                self.prefill_len as u64 + self.decode_steps as u64
            ));
        }
        if self.pool_kernel_used != 0 && self.pool_kernel_used % 2 == 0 {
            return fail(format!(
                "pool_kernel_used must be odd or 0, got {}",
                self.pool_kernel_used
            ));
        }
        Ok(())
    }
}

/// All heads' records for one step, laid out `[layer][head][slot]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepAttention {
    pub step_index: u32,
    pub entries: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub manifest: TraceManifest,
    pub steps: Vec<StepAttention>,
}

/// A violated trace invariant, with a human-readable location.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct InvariantViolation(pub String);

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("bad magic: expected \"HCTRACE1\", found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported trace format version {version:?}")]
    UnsupportedVersion { version: char },
    #[error("truncated payload at byte offset {offset} while reading {what}")]
    Truncated { offset: u64, what: String },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("invariant violation: {0}")]
    Invariant(#[from] InvariantViolation),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl StepAttention {
    /// Records of one head in a step, given that step's manifest.
    pub fn head<'a>(&'a self, manifest: &TraceManifest, id: HeadId) -> &'a [Entry] {
        let slot = manifest.head_slot(id).expect("head within manifest bounds");
        let k = manifest.trace_topk as usize;
        &self.entries[slot * k..(slot + 1) * k]
    }
}

impl AttentionTrace {
    /// Records of `head` at `step` (0 = prefill).
    pub fn head_entries(&self, step: usize, head: HeadId) -> &[Entry] {
        self.steps[step].head(&self.manifest, head)
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Checks every structural invariant, reporting the first violation.
    pub fn validate(&self) -> Result<(), InvariantViolation> {
        self.manifest.validate()?;
        let m = &self.manifest;
        let expected_steps = m.decode_steps as usize + 1;
        if self.steps.len() != expected_steps {
            return Err(InvariantViolation(format!(
                "expected {} step records, found {}",
                expected_steps,
                self.steps.len()
            )));
        }
        let k = m.trace_topk as usize;
        for (s, step) in self.steps.iter().enumerate() {
            if step.step_index as usize != s {
                return Err(InvariantViolation(format!(
                    "step record {} carries step_index {}",
                    s, step.step_index
                )));
            }
            if step.entries.len() != m.entries_per_step() {
                return Err(InvariantViolation(format!(
                    "step {} holds {} entries, expected {}",
                    s,
                    step.entries.len(),
                    m.entries_per_step()
                )));
            }
            let seq_len = m.seq_len_at(s as u32);
            for head in m.heads() {
                let slot = m.head_slot(head).unwrap();
                let records = &step.entries[slot * k..(slot + 1) * k];
                validate_head_records(records, seq_len)
                    .map_err(|e| InvariantViolation(format!("step {} head {}: {}", s, head, e)))?;
            }
        }
        Ok(())
    }
}

fn validate_head_records(records: &[Entry], seq_len: u64) -> Result<(), String> {
    let mut in_padding = false;
    let mut prev = f32::INFINITY;
    let mut seen = std::collections::HashSet::with_capacity(records.len());
    for (i, e) in records.iter().enumerate() {
        if e.is_padding() {
            if e.score != 0.0 {
                return Err(format!("padding slot {} has nonzero score {}", i, e.score));
            }
            in_padding = true;
            continue;
        }
        if in_padding {
            return Err(format!("real entry at slot {} follows padding", i));
        }
        if !e.score.is_finite() || e.score < 0.0 {
            return Err(format!("slot {} has invalid score {}", i, e.score));
        }
        if e.score > prev {
            return Err(format!("scores increase at slot {}", i));
        }
        if e.index as u64 >= seq_len {
            return Err(format!(
                "slot {} index {} outside visible length {}",
                i, e.index, seq_len
            ));
        }
        if !seen.insert(e.index) {
            return Err(format!("slot {} repeats index {}", i, e.index));
        }
        prev = e.score;
    }
    Ok(())
}
