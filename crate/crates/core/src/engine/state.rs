use std::collections::VecDeque;

use super::{drift_check, pivot_overlap, EngineConfig, EngineError, MonitorCadence, PolicyVariant};
use crate::budget::BudgetPlan;
use crate::eval::attention_recall_by;
use crate::metrics::{top_k_sparse, IndexSet};
use crate::profiler::{Role, TaxonomyResult};
use crate::report::{RetrievalEvent, SatelliteFetch, StepRecord};
use crate::scalar::Scalar;
use crate::trace::{AttentionTrace, Entry, HeadId, StepAttention, TraceManifest};

#[derive(Clone, Debug, PartialEq)]
pub struct HeadCache {
    pub id: HeadId,
    pub role: Role,
    /// `l_i` for compressed heads, 0 for full heads.
    pub capacity: usize,
    /// Budgeted positions of a compressed head (its top-`l_i` selection).
    pub selected: IndexSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PivotMonitor<T> {
    pub head: HeadId,
    pub cluster_id: u32,
    pub satellites: Vec<HeadId>,
    /// Baseline length: `round(L_base)`, capped by the recorded prefill entries.
    pub base_len: usize,
    pub base: IndexSet,
    pub overlaps: VecDeque<T>,
}

#[derive(Clone, Debug, PartialEq)]
struct PendingTransfer {
    completion_step: u32,
    satellite_slot: usize,
    indices: IndexSet,
}

/// Result of one decode step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome<T> {
    pub record: StepRecord<T>,
    /// Attention-mass recall of every head, in `(layer, head)` order.
    pub head_recall: Vec<T>,
    /// Indices into [`CacheState::events`] of retrievals triggered at this step.
    pub triggered: Vec<usize>,
}

/// Residency state of every head for one simulated request.
#[derive(Clone, Debug)]
pub struct CacheState<T> {
    manifest: TraceManifest,
    variant: PolicyVariant,
    step: u32,
    heads: Vec<HeadCache>,
    pivots: Vec<PivotMonitor<T>>,
    pending: Vec<PendingTransfer>,
    link_free_at: f64,
    events: Vec<RetrievalEvent>,
    cumulative_bytes: u64,
    protected_prefill: IndexSet,
    budget_limit: T,
    config: EngineConfig<T>,
}

impl<T: Scalar> CacheState<T> {
    /// Builds the prefill state: full heads keep everything, compressed heads
    /// their top-`l_i` prefill positions, pivots their baseline sets.
    pub fn prefill_init(
        trace: &AttentionTrace,
        taxonomy: &TaxonomyResult<T>,
        plan: &BudgetPlan<T>,
        config: &EngineConfig<T>,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        taxonomy.validate()?;
        let m = &trace.manifest;
        let l = m.prefill_len as usize;
        if taxonomy.num_heads() != m.num_heads() || plan.num_heads != m.num_heads() {
            return Err(EngineError::Mismatch(format!(
                "trace has {} heads, taxonomy {}, plan {}",
                m.num_heads(),
                taxonomy.num_heads(),
                plan.num_heads
            )));
        }
        if plan.prefill_len != l {
            return Err(EngineError::Mismatch(format!(
                "plan built for L={}, trace has L={}",
                plan.prefill_len, l
            )));
        }
        if plan.num_comp != taxonomy.comp().len() {
            return Err(EngineError::Mismatch(format!(
                "plan has {} compressed heads, taxonomy {}",
                plan.num_comp,
                taxonomy.comp().len()
            )));
        }
        if plan.num_comp > 0 && plan.base_length_int == 0 {
            return Err(EngineError::Infeasible("base length rounds to 0".into()));
        }

        let prefill = &trace.steps[0];
        let mut heads = Vec::with_capacity(m.num_heads());
        for id in m.heads() {
            let record = taxonomy.record(id).ok_or(EngineError::UnknownHead(id))?;
            let (capacity, selected) = if record.role.is_full() {
                (0, IndexSet::new())
            } else {
                let capacity = match config.policy_variant {
                    PolicyVariant::NoAllocation => plan.base_length_int,
                    _ => plan.length_of(id).ok_or_else(|| {
                        EngineError::Mismatch(format!("plan has no length for head {}", id))
                    })?,
                };
                let selected = if capacity == 0 {
                    IndexSet::new()
                } else {
                    top_k_sparse(prefill.head(m, id), capacity)
                };
                (capacity, selected)
            };
            heads.push(HeadCache {
                id,
                role: record.role,
                capacity,
                selected,
            });
        }

        let mut pivots = Vec::new();
        for c in &taxonomy.clusters {
            let entries = prefill.head(m, c.pivot);
            let recorded = entries.iter().filter(|e| !e.is_padding()).count();
            let base_len = plan.base_length_int.min(recorded);
            if base_len == 0 {
                return Err(EngineError::Infeasible(format!(
                    "pivot {} has no recorded prefill attention",
                    c.pivot
                )));
            }
            pivots.push(PivotMonitor {
                head: c.pivot,
                cluster_id: c.id,
                satellites: c.satellites.clone(),
                base_len,
                base: top_k_sparse(entries, base_len),
                overlaps: VecDeque::with_capacity(config.window),
            });
        }

        let state = Self {
            manifest: m.clone(),
            variant: config.policy_variant,
            step: 0,
            heads,
            pivots,
            pending: Vec::new(),
            link_free_at: 0.0,
            events: Vec::new(),
            cumulative_bytes: 0,
            protected_prefill: config.protection.prefill_positions(l),
            budget_limit: plan.ceiling_with_slack(),
            config: config.clone(),
        };
        state.check_budget()?;
        Ok(state)
    }

    pub fn step(&self) -> u32 {
        self.step
    }

    pub fn heads(&self) -> &[HeadCache] {
        &self.heads
    }

    pub fn head(&self, id: HeadId) -> Option<&HeadCache> {
        self.manifest.head_slot(id).map(|s| &self.heads[s])
    }

    pub fn pivots(&self) -> &[PivotMonitor<T>] {
        &self.pivots
    }

    pub fn events(&self) -> &[RetrievalEvent] {
        &self.events
    }

    pub fn cumulative_bytes(&self) -> u64 {
        self.cumulative_bytes
    }

    fn prefill_len(&self) -> usize {
        self.manifest.prefill_len as usize
    }

    /// Whether `position` is resident for head `slot` at the current step.
    pub fn is_resident(&self, slot: usize, position: u32) -> bool {
        let h = &self.heads[slot];
        (position as u64) < self.manifest.seq_len_at(self.step)
            && (h.role.is_full()
                || self.config.protection.covers(position, self.prefill_len())
                || h.selected.contains(position))
    }

    /// Every resident position of `id` at the current step.
    pub fn gpu_set(&self, id: HeadId) -> Option<IndexSet> {
        let slot = self.manifest.head_slot(id)?;
        let seq_len = self.manifest.seq_len_at(self.step) as u32;
        Some(
            (0..seq_len)
                .filter(|&p| self.is_resident(slot, p))
                .collect(),
        )
    }

    /// Entries charged against the budget.
    pub fn budgeted_entries(&self) -> usize {
        let l = self.prefill_len();
        self.heads
            .iter()
            .map(|h| {
                if h.role.is_full() {
                    l
                } else {
                    h.selected.len()
                }
            })
            .sum()
    }

    fn protected_entries(&self) -> usize {
        self.heads
            .iter()
            .filter(|h| h.role.is_compressed())
            .map(|h| {
                self.protected_prefill.len() - self.protected_prefill.intersection_len(&h.selected)
            })
            .sum()
    }

    fn check_budget(&self) -> Result<(), EngineError> {
        let entries = self.budgeted_entries();
        if T::from_count(entries) > self.budget_limit {
            return Err(EngineError::BudgetExceeded {
                step: self.step,
                entries,
                ceiling: self.budget_limit.as_f64(),
            });
        }
        Ok(())
    }

    fn head_recalls(&self, step: &StepAttention) -> Vec<T> {
        (0..self.heads.len())
            .map(|slot| {
                let entries = step.head(&self.manifest, self.heads[slot].id);
                attention_recall_by(|p| self.is_resident(slot, p), entries)
                    .unwrap_or_else(|_| T::one())
            })
            .collect()
    }

    fn record(
        &self,
        step: &StepAttention,
        head_recall: &[T],
        retrieval_flag: bool,
    ) -> StepRecord<T> {
        let mean = head_recall.iter().copied().sum::<T>() / T::from_count(head_recall.len());
        let min = head_recall.iter().copied().fold(T::one(), T::min);
        let bytes_in_flight = self
            .events
            .iter()
            .filter(|e| e.completion_step > step.step_index)
            .map(|e| e.bytes)
            .sum();
        StepRecord {
            step: step.step_index,
            recall: mean,
            min_head_recall: min,
            gpu_entries: self.budgeted_entries(),
            protected_entries: self.protected_entries(),
            decode_entries: self.heads.len() * self.step as usize,
            bytes_in_flight,
            cumulative_bytes: self.cumulative_bytes,
            retrieval_flag,
        }
    }

    /// Report row for the prefill step.
    pub fn prefill_record(&self, prefill: &StepAttention) -> Result<StepRecord<T>, EngineError> {
        if self.step != 0 || prefill.step_index != 0 {
            return Err(EngineError::OutOfOrder {
                expected: 0,
                got: prefill.step_index,
            });
        }
        let recalls = self.head_recalls(prefill);
        Ok(self.record(prefill, &recalls, false))
    }

    /// Applies decode step `step.step_index`, which must follow the last one applied.
    pub fn decode_step(
        &mut self,
        step: &StepAttention,
        config: &EngineConfig<T>,
    ) -> Result<StepOutcome<T>, EngineError> {
        let t = step.step_index;
        if t != self.step + 1 || t > self.manifest.decode_steps {
            return Err(EngineError::OutOfOrder {
                expected: self.step + 1,
                got: t,
            });
        }
        if step.entries.len() != self.manifest.entries_per_step() {
            return Err(EngineError::Mismatch(format!(
                "step {} carries {} entries, expected {}",
                t,
                step.entries.len(),
                self.manifest.entries_per_step()
            )));
        }

        // (1) land finished transfers, replacing each satellite's selection
        let (done, waiting): (Vec<_>, Vec<_>) = std::mem::take(&mut self.pending)
            .into_iter()
            .partition(|p| p.completion_step <= t);
        self.pending = waiting;
        for p in done {
            self.heads[p.satellite_slot].selected = p.indices;
        }

        // (2) the new token becomes visible and resident everywhere
        self.step = t;
        let head_recall = self.head_recalls(step);

        // (3)-(4) pivot monitoring and retrieval
        let mut triggered = Vec::new();
        if self.variant != PolicyVariant::NoRetrieval {
            for pi in 0..self.pivots.len() {
                if let Some(idx) = self.monitor_pivot(pi, step, config)? {
                    triggered.push(idx);
                }
            }
        }

        self.check_budget()?;
        let record = self.record(step, &head_recall, !triggered.is_empty());
        Ok(StepOutcome {
            record,
            head_recall,
            triggered,
        })
    }

    fn monitor_pivot(
        &mut self,
        pi: usize,
        step: &StepAttention,
        config: &EngineConfig<T>,
    ) -> Result<Option<usize>, EngineError> {
        let t = step.step_index;
        let window = config.window;
        let pivot_entries: &[Entry] = step.head(&self.manifest, self.pivots[pi].head);
        let current = top_k_sparse(pivot_entries, self.pivots[pi].base_len);
        let o = pivot_overlap::<T>(&current, &self.pivots[pi].base, self.pivots[pi].base_len)?;

        let monitor = &mut self.pivots[pi];
        monitor.overlaps.push_back(o);
        let evaluate = match config.cadence {
            MonitorCadence::WindowBoundary => t as usize % window == 0,
            MonitorCadence::EveryStep => {
                if monitor.overlaps.len() > window {
                    monitor.overlaps.pop_front();
                }
                monitor.overlaps.len() == window
            }
        };
        if !evaluate {
            return Ok(None);
        }
        let values: Vec<T> = monitor.overlaps.iter().copied().collect();
        let fire = drift_check(&values, window, config.tau_drift)?;
        if matches!(config.cadence, MonitorCadence::WindowBoundary) || fire {
            monitor.overlaps.clear();
        }
        if !fire {
            return Ok(None);
        }

        let satellites = monitor.satellites.clone();
        let (pivot, cluster_id) = (monitor.head, monitor.cluster_id);
        // a decode step may record fewer entries than the prefill baseline
        if !current.is_empty() {
            monitor.base_len = current.len();
            monitor.base = current;
        }

        let mut fetches = Vec::with_capacity(satellites.len());
        let mut fetched_sets = Vec::with_capacity(satellites.len());
        for s in satellites {
            let slot = self
                .manifest
                .head_slot(s)
                .ok_or(EngineError::UnknownHead(s))?;
            let indices = top_k_sparse(pivot_entries, self.heads[slot].capacity);
            fetches.push(SatelliteFetch {
                satellite: s,
                indices: indices.as_slice().to_vec(),
            });
            fetched_sets.push((slot, indices));
        }

        let entries: usize = fetches.iter().map(|f| f.indices.len()).sum();
        let bytes = entries as u64 * self.manifest.bytes_per_kv_entry as u64;
        let start = self.link_free_at.max(t as f64);
        let finish = start + bytes as f64 / config.transfer_bandwidth;
        self.link_free_at = finish;
        let earliest = t + config.update_delay_steps;
        let completion_step = earliest.max(finish.ceil() as u32);
        for (slot, indices) in fetched_sets {
            self.pending.push(PendingTransfer {
                completion_step,
                satellite_slot: slot,
                indices,
            });
        }
        self.cumulative_bytes += bytes;
        self.events.push(RetrievalEvent {
            trigger_step: t,
            pivot,
            cluster_id,
            fetches,
            bytes,
            completion_step,
            exposed_steps: completion_step - earliest,
        });
        Ok(Some(self.events.len() - 1))
    }
}
