//! Set-overlap metrics over top-k attention index sets.
//!
//! Provides the smoothed top-k extractor, the overlap coefficient, per-head
//! stability and similarity scores and the layer-to-layer similarity matrix.

use std::cmp::Ordering;

use thiserror::Error;

use crate::scalar::{median, Scalar};
use crate::trace::{AttentionTrace, Entry, HeadId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("k must be at least 1")]
    InvalidK,
    #[error("pooling kernel must be odd or 0, got {0}")]
    EvenKernel(usize),
    #[error("pooling requires dense weights")]
    DenseRequired,
    #[error("overlap of an empty index set is undefined")]
    EmptySet,
    #[error("score needs at least one decode step")]
    EmptySequence,
    #[error("head has no peer in its layer")]
    NoPeers,
    #[error("step {step} out of range (trace has {steps} steps)")]
    StepOutOfRange { step: usize, steps: usize },
    #[error("set sizes disagree: {0}")]
    SizeMismatch(String),
}

/// Sorted, duplicate-free set of token positions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct IndexSet(Vec<u32>);

impl IndexSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every non-padding index in `entries`.
    pub fn from_entries(entries: &[Entry]) -> Self {
        entries
            .iter()
            .filter(|e| !e.is_padding())
            .map(|e| e.index)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, index: u32) -> bool {
        self.0.binary_search(&index).is_ok()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.0.iter().copied()
    }

    pub fn insert(&mut self, index: u32) -> bool {
        match self.0.binary_search(&index) {
            Ok(_) => false,
            Err(pos) => {
                self.0.insert(pos, index);
                true
            }
        }
    }

    pub fn intersection_len(&self, other: &IndexSet) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        let (a, b) = (&self.0, &other.0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                Ordering::Less => i += 1,
                Ordering::Greater => j += 1,
                Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    pub fn is_subset(&self, other: &IndexSet) -> bool {
        self.intersection_len(other) == self.len()
    }
}

impl FromIterator<u32> for IndexSet {
    fn from_iter<I: IntoIterator<Item = u32>>(iter: I) -> Self {
        let mut v: Vec<u32> = iter.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        IndexSet(v)
    }
}

impl<'a> IntoIterator for &'a IndexSet {
    type Item = &'a u32;
    type IntoIter = std::slice::Iter<'a, u32>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Input to [`top_k_indices`].
#[derive(Clone, Copy, Debug)]
pub enum Weights<'a, T> {
    /// Recorded `(index, score)` pairs; padding entries are ignored.
    Sparse(&'a [Entry]),
    /// One weight per position.
    Dense(&'a [T]),
}

/// Same-length 1-D average pooling with zero padding at both boundaries.
pub fn avg_pool<T: Scalar>(weights: &[T], kernel: usize) -> Result<Vec<T>, MetricsError> {
    if kernel % 2 == 0 {
        return Err(MetricsError::EvenKernel(kernel));
    }
    let half = kernel / 2;
    let n = weights.len();
    let k = T::from_count(kernel);
    Ok((0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            weights[lo..hi].iter().copied().sum::<T>() / k
        })
        .collect())
}

/// Indices of the `k` largest weights, optionally after average pooling.
///
/// Ties are broken by higher raw weight, then lower index. Fewer than `k`
/// candidates yields all of them.
pub fn top_k_indices<T: Scalar>(
    weights: Weights<'_, T>,
    k: usize,
    pool_kernel: usize,
) -> Result<IndexSet, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    if pool_kernel != 0 && pool_kernel % 2 == 0 {
        return Err(MetricsError::EvenKernel(pool_kernel));
    }
    match weights {
        Weights::Sparse(entries) => {
            if pool_kernel != 0 {
                return Err(MetricsError::DenseRequired);
            }
            Ok(top_k_sparse(entries, k))
        }
        Weights::Dense(raw) => {
            let pooled = if pool_kernel == 0 {
                raw.to_vec()
            } else {
                avg_pool(raw, pool_kernel)?
            };
            let mut order: Vec<usize> = (0..raw.len()).collect();
            order.sort_by(|&a, &b| {
                pooled[b]
                    .partial_cmp(&pooled[a])
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| raw[b].partial_cmp(&raw[a]).unwrap_or(Ordering::Equal))
                    .then_with(|| a.cmp(&b))
            });
            Ok(order.into_iter().take(k).map(|i| i as u32).collect())
        }
    }
}

/// Top-`k` of sparse records by score descending, then index ascending.
pub fn top_k_sparse(entries: &[Entry], k: usize) -> IndexSet {
    ranked_sparse(entries).into_iter().take(k).collect()
}

/// Non-padding indices ordered by score descending, then index ascending.
pub fn ranked_sparse(entries: &[Entry]) -> Vec<u32> {
    let mut real: Vec<&Entry> = entries.iter().filter(|e| !e.is_padding()).collect();
    real.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.index.cmp(&b.index))
    });
    real.into_iter().map(|e| e.index).collect()
}

/// `|a ∩ b| / min(|a|, |b|)`.
pub fn overlap_coefficient<T: Scalar>(a: &IndexSet, b: &IndexSet) -> Result<T, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    Ok(T::from_count(a.intersection_len(b)) / T::from_count(a.len().min(b.len())))
}

/// `|current ∩ base| / normalizer`: overlap against a fixed reference length
/// instead of the smaller set size.
pub fn normalized_overlap<T: Scalar>(
    current: &IndexSet,
    base: &IndexSet,
    normalizer: usize,
) -> Result<T, MetricsError> {
    if normalizer == 0 {
        return Err(MetricsError::EmptySet);
    }
    if current.len() > normalizer || base.len() > normalizer {
        return Err(MetricsError::SizeMismatch(format!(
            "sets of {} and {} exceed normalizer {}",
            current.len(),
            base.len(),
            normalizer
        )));
    }
    Ok(T::from_count(current.intersection_len(base)) / T::from_count(normalizer))
}

/// Median over decode steps of the overlap with the prefill set.
pub fn stability_score<T: Scalar>(
    decode_sets: &[IndexSet],
    prefill_set: &IndexSet,
) -> Result<T, MetricsError> {
    if decode_sets.is_empty() {
        return Err(MetricsError::EmptySequence);
    }
    let overlaps = decode_sets
        .iter()
        .map(|s| overlap_coefficient(s, prefill_set))
        .collect::<Result<Vec<T>, _>>()?;
    Ok(median(&overlaps).expect("nonempty, finite"))
}

/// Median over steps of the best overlap with any peer head.
///
/// `peer_sets[p][t]` is peer `p`'s set at step `t`; every peer must cover the
/// same steps as `head_sets`.
pub fn similarity_score<T: Scalar>(
    head_sets: &[IndexSet],
    peer_sets: &[&[IndexSet]],
) -> Result<T, MetricsError> {
    if peer_sets.is_empty() {
        return Err(MetricsError::NoPeers);
    }
    if head_sets.is_empty() {
        return Err(MetricsError::EmptySequence);
    }
    if let Some(p) = peer_sets.iter().find(|p| p.len() != head_sets.len()) {
        return Err(MetricsError::SizeMismatch(format!(
            "peer covers {} steps, head covers {}",
            p.len(),
            head_sets.len()
        )));
    }
    let mut maxima = Vec::with_capacity(head_sets.len());
    for (t, own) in head_sets.iter().enumerate() {
        let mut best = T::zero();
        for peer in peer_sets {
            best = best.max(overlap_coefficient(own, &peer[t])?);
        }
        maxima.push(best);
    }
    Ok(median(&maxima).expect("nonempty, finite"))
}

/// Default profiling top-k: `min(1000, ceil(L / 10))`.
pub fn default_profiling_topk(prefill_len: usize) -> usize {
    prefill_len.div_ceil(10).clamp(1, 1000)
}

/// Top-`k` sets of every head at every step: `sets[step][head_slot]`.
///
/// Traces carry sparse records, so no pooling is applied here.
pub fn trace_top_sets(
    trace: &AttentionTrace,
    k: usize,
) -> Result<Vec<Vec<IndexSet>>, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    let heads: Vec<HeadId> = trace.manifest.heads().collect();
    Ok(trace
        .steps
        .iter()
        .map(|step| {
            heads
                .iter()
                .map(|&h| top_k_sparse(step.head(&trace.manifest, h), k))
                .collect()
        })
        .collect())
}

/// Entry `(i, j)`: mean over heads of layer `i` of the best overlap with any
/// head of layer `j` (excluding the head itself on the diagonal) at `step`.
///
/// A diagonal entry of a single-head layer is 0, matching the single-head
/// similarity convention.
pub fn layer_similarity_matrix<T: Scalar>(
    trace: &AttentionTrace,
    step: usize,
    k: usize,
) -> Result<Vec<Vec<T>>, MetricsError> {
    if step >= trace.num_steps() {
        return Err(MetricsError::StepOutOfRange {
            step,
            steps: trace.num_steps(),
        });
    }
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    let m = &trace.manifest;
    let layers = m.num_layers as usize;
    let per_layer = m.heads_per_layer as usize;
    let sets: Vec<IndexSet> = m
        .heads()
        .map(|h| top_k_sparse(trace.head_entries(step, h), k))
        .collect();

    let mut out = vec![vec![T::zero(); layers]; layers];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let mut total = T::zero();
            for h in 0..per_layer {
                let own = &sets[i * per_layer + h];
                let mut best = T::zero();
                for g in 0..per_layer {
                    if i == j && g == h {
                        continue;
                    }
                    let other = &sets[j * per_layer + g];
                    if own.is_empty() || other.is_empty() {
                        continue;
                    }
                    best = best.max(overlap_coefficient(own, other)?);
                }
                total = total + best;
            }
            *cell = total / T::from_count(per_layer);
        }
    }
    Ok(out)
}
