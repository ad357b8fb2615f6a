//! Synthetic trace generator with planted head archetypes.
//!
//! Every head attends to a "hot set" of prefill positions. Slot `r` of a hot set
//! carries score `c * 0.9^r` (normalized to unit mass), and slots keep their rank
//! when their occupant is replaced, so a drifting head keeps its score profile
//! while the attended positions move.

use std::collections::HashSet;

use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AttentionTrace, Entry, HeadId, StepAttention, TraceError, TraceManifest};
use crate::profiler::Role;

const SCORE_RATIO: f64 = 0.9;
const ROUNDING_GUARD: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadArchetype {
    /// Fixed prefill hot set; `noise` of the slots are swapped for random
    /// positions at each decode step.
    Stable { hot_set: u32, noise: f64 },
    /// `drift_rate` of the current hot set is replaced permanently at every step.
    Decaying { hot_set: u32, drift_rate: f64 },
    /// Shares at least `agreement` of its cluster's per-step set.
    ClusterMember { cluster: u32, agreement: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub hot_set: u32,
    #[serde(default)]
    pub drift_rate: f64,
}

/// Replaces `fraction` of the hot set of every listed head at `step`.
/// A listed cluster member shifts its whole cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftEvent {
    pub step: u32,
    pub heads: Vec<HeadId>,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(default = "default_model_name")]
    pub model_name: String,
    pub num_layers: u32,
    pub heads_per_layer: u32,
    pub prefill_len: u32,
    pub decode_steps: u32,
    pub trace_topk: u32,
    #[serde(default = "default_bytes_per_entry")]
    pub bytes_per_kv_entry: u32,
    /// One archetype per head in `(layer, head)` order.
    pub heads: Vec<HeadArchetype>,
    #[serde(default)]
    pub clusters: Vec<ClusterSpec>,
    #[serde(default)]
    pub drift_events: Vec<DriftEvent>,
    pub seed: u64,
}

fn default_model_name() -> String {
    "synthetic".to_string()
}

fn default_bytes_per_entry() -> u32 {
    256
}

/// Expected role of every head, derived from the archetypes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub heads: Vec<GroundTruthHead>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthHead {
    pub layer: u32,
    pub head: u32,
    pub role: Role,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cluster_id: Option<u32>,
}

impl GroundTruth {
    pub fn role_of(&self, id: HeadId) -> Option<Role> {
        self.heads
            .iter()
            .find(|h| h.layer == id.layer && h.head == id.head)
            .map(|h| h.role)
    }
}

impl SynthSpec {
    fn manifest(&self) -> TraceManifest {
        TraceManifest {
            model_name: self.model_name.clone(),
            num_layers: self.num_layers,
            heads_per_layer: self.heads_per_layer,
            prefill_len: self.prefill_len,
            decode_steps: self.decode_steps,
            trace_topk: self.trace_topk,
            pool_kernel_used: 0,
            bytes_per_kv_entry: self.bytes_per_kv_entry,
        }
    }

    fn hot_set_of(&self, a: &HeadArchetype) -> u32 {
        match a {
            HeadArchetype::Stable { hot_set, .. } | HeadArchetype::Decaying { hot_set, .. } => {
                *hot_set
            }
            HeadArchetype::ClusterMember { cluster, .. } => {
                self.clusters[*cluster as usize].hot_set
            }
        }
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        let bad = |m: String| Err(TraceError::InvalidSpec(m));
        self.manifest()
            .validate()
            .map_err(|e| TraceError::InvalidSpec(e.0))?;
        let n = self.num_layers as usize * self.heads_per_layer as usize;
        if self.heads.len() != n {
            return bad(format!("{} archetypes for {} heads", self.heads.len(), n));
        }
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        let mut members: Vec<Vec<HeadId>> = vec![Vec::new(); self.clusters.len()];
        for (i, a) in self.heads.iter().enumerate() {
            let id = HeadId::new(
                (i / self.heads_per_layer as usize) as u32,
                (i % self.heads_per_layer as usize) as u32,
            );
            match a {
                HeadArchetype::Stable { noise: r, .. }
                | HeadArchetype::Decaying { drift_rate: r, .. }
                | HeadArchetype::ClusterMember { agreement: r, .. } => {
                    if !in_unit(*r) {
                        return bad(format!("head {}: rate {} outside [0,1]", id, r));
                    }
                }
            }
            if let HeadArchetype::ClusterMember { cluster, .. } = a {
                match members.get_mut(*cluster as usize) {
                    Some(m) => m.push(id),
                    None => return bad(format!("head {}: unknown cluster {}", id, cluster)),
                }
            }
            let hot = self.hot_set_of(a);
            if hot == 0 || hot > self.trace_topk {
                return bad(format!(
                    "head {}: hot set {} must be in 1..={}",
                    id, hot, self.trace_topk
                ));
            }
            if 3 * hot as u64 > self.prefill_len as u64 {
                return bad(format!(
                    "head {}: hot set {} too large for prefill length {}",
                    id, hot, self.prefill_len
                ));
            }
        }
        for (c, (spec, m)) in self.clusters.iter().zip(&members).enumerate() {
            if !in_unit(spec.drift_rate) {
                return bad(format!("cluster {}: drift rate outside [0,1]", c));
            }
            if m.len() < 2 {
                return bad(format!("cluster {} has {} members, need 2", c, m.len()));
            }
            if m.iter().any(|h| h.layer != m[0].layer) {
                return bad(format!("cluster {} spans layers", c));
            }
        }
        for ev in &self.drift_events {
            if ev.step == 0 || ev.step > self.decode_steps {
                return bad(format!("drift event at step {} outside 1..=T", ev.step));
            }
            if !in_unit(ev.fraction) {
                return bad(format!("drift fraction {} outside [0,1]", ev.fraction));
            }
            if let Some(h) = ev
                .heads
                .iter()
                .find(|h| h.layer >= self.num_layers || h.head >= self.heads_per_layer)
            {
                return bad(format!("drift event names unknown head {}", h));
            }
        }
        Ok(())
    }

    pub fn ground_truth(&self) -> GroundTruth {
        let mut pivot_taken = vec![false; self.clusters.len()];
        let heads = self
            .heads
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let layer = (i / self.heads_per_layer as usize) as u32;
                let head = (i % self.heads_per_layer as usize) as u32;
                let (role, cluster_id) = match a {
                    HeadArchetype::Stable { .. } => (Role::Anchor, None),
                    HeadArchetype::Decaying { .. } => (Role::Volatile, None),
                    HeadArchetype::ClusterMember { cluster, .. } => {
                        let c = *cluster as usize;
                        let role = if pivot_taken[c] {
                            Role::Satellite
                        } else {
                            pivot_taken[c] = true;
                            Role::Pivot
                        };
                        (role, Some(*cluster))
                    }
                };
                GroundTruthHead {
                    layer,
                    head,
                    role,
                    cluster_id,
                }
            })
            .collect();
        GroundTruth { heads }
    }
}

/// A ranked hot set that remembers its prefill membership.
struct HotSet {
    slots: Vec<u32>,
    origin: HashSet<u32>,
}

impl HotSet {
    fn draw(rng: &mut ChaCha8Rng, len: u32, size: u32) -> Self {
        let slots: Vec<u32> = index::sample(rng, len as usize, size as usize)
            .into_iter()
            .map(|i| i as u32)
            .collect();
        let origin = slots.iter().copied().collect();
        Self { slots, origin }
    }

    /// Permanently replaces `count` random slots with positions outside both
    /// the current and the prefill membership.
    fn replace(&mut self, rng: &mut ChaCha8Rng, len: u32, count: usize) {
        if count == 0 {
            return;
        }
        let mut taken: HashSet<u32> = self.slots.iter().copied().collect();
        taken.extend(self.origin.iter().copied());
        let victims = index::sample(rng, self.slots.len(), count.min(self.slots.len()));
        for slot in victims {
            let fresh = fresh_position(rng, len, &taken);
            taken.insert(fresh);
            self.slots[slot] = fresh;
        }
    }

    /// Copy of the slots with `count` random slots swapped for outside positions.
    fn perturbed(&self, rng: &mut ChaCha8Rng, len: u32, count: usize) -> Vec<u32> {
        let mut out = self.slots.clone();
        if count == 0 {
            return out;
        }
        let mut taken: HashSet<u32> = self.slots.iter().copied().collect();
        for slot in index::sample(rng, out.len(), count.min(out.len())) {
            let fresh = fresh_position(rng, len, &taken);
            taken.insert(fresh);
            out[slot] = fresh;
        }
        out
    }
}

fn fresh_position(rng: &mut ChaCha8Rng, len: u32, taken: &HashSet<u32>) -> u32 {
    loop {
        let p = rng.gen_range(0..len);
        if !taken.contains(&p) {
            return p;
        }
    }
}

fn scaled_count(rate: f64, size: usize, round: bool) -> usize {
    let x = rate * size as f64;
    let n = if round {
        x.round()
    } else {
        (x + ROUNDING_GUARD).floor()
    };
    (n as usize).min(size)
}

fn geometric_scores(n: usize) -> Vec<f32> {
    let norm = (1.0 - SCORE_RATIO) / (1.0 - SCORE_RATIO.powi(n as i32));
    (0..n)
        .map(|r| (norm * SCORE_RATIO.powi(r as i32)) as f32)
        .collect()
}

enum HeadState {
    Own(HotSet),
    Member { cluster: usize },
}

/// Generates a trace from `spec`, plus the expected role of every head.
/// Output is a pure function of `spec` (including its seed).
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(AttentionTrace, GroundTruth), TraceError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let len = spec.prefill_len;
    let manifest = spec.manifest();
    let k = spec.trace_topk as usize;

    let mut clusters: Vec<HotSet> = spec
        .clusters
        .iter()
        .map(|c| HotSet::draw(&mut rng, len, c.hot_set))
        .collect();
    let mut heads: Vec<HeadState> = spec
        .heads
        .iter()
        .map(|a| match a {
            HeadArchetype::Stable { hot_set, .. } | HeadArchetype::Decaying { hot_set, .. } => {
                HeadState::Own(HotSet::draw(&mut rng, len, *hot_set))
            }
            HeadArchetype::ClusterMember { cluster, .. } => HeadState::Member {
                cluster: *cluster as usize,
            },
        })
        .collect();

    let mut steps = Vec::with_capacity(spec.decode_steps as usize + 1);
    for s in 0..=spec.decode_steps {
        if s > 0 {
            for (state, a) in heads.iter_mut().zip(&spec.heads) {
                if let (HeadState::Own(hot), HeadArchetype::Decaying { drift_rate, .. }) =
                    (state, a)
                {
                    let n = scaled_count(*drift_rate, hot.slots.len(), true);
                    hot.replace(&mut rng, len, n);
                }
            }
            for (hot, c) in clusters.iter_mut().zip(&spec.clusters) {
                let n = scaled_count(c.drift_rate, hot.slots.len(), true);
                hot.replace(&mut rng, len, n);
            }
            for ev in spec.drift_events.iter().filter(|e| e.step == s) {
                let mut shifted_clusters = Vec::new();
                for id in &ev.heads {
                    let slot = manifest.head_slot(*id).expect("validated head");
                    match &mut heads[slot] {
                        HeadState::Own(hot) => {
                            let n = scaled_count(ev.fraction, hot.slots.len(), true);
                            hot.replace(&mut rng, len, n);
                        }
                        HeadState::Member { cluster } => {
                            if !shifted_clusters.contains(cluster) {
                                shifted_clusters.push(*cluster);
                            }
                        }
                    }
                }
                for c in shifted_clusters {
                    let hot = &mut clusters[c];
                    let n = scaled_count(ev.fraction, hot.slots.len(), true);
                    hot.replace(&mut rng, len, n);
                }
            }
        }

        let mut entries = Vec::with_capacity(manifest.entries_per_step());
        for (state, a) in heads.iter().zip(&spec.heads) {
            let members = match (state, a) {
                (HeadState::Own(hot), HeadArchetype::Stable { noise, .. }) if s > 0 => {
                    let n = scaled_count(*noise, hot.slots.len(), false);
                    hot.perturbed(&mut rng, len, n)
                }
                (HeadState::Own(hot), _) => hot.slots.clone(),
                (HeadState::Member { cluster }, HeadArchetype::ClusterMember { agreement, .. }) => {
                    let hot = &clusters[*cluster];
                    let n = scaled_count(1.0 - agreement, hot.slots.len(), false);
                    hot.perturbed(&mut rng, len, n)
                }
                (HeadState::Member { .. }, _) => {
                    unreachable!("member state implies member archetype")
                }
            };
            let scores = geometric_scores(members.len());
            entries.extend(
                members
                    .iter()
                    .zip(scores)
                    .map(|(&index, score)| Entry { index, score }),
            );
            entries.extend(std::iter::repeat(Entry::PADDING).take(k - members.len()));
        }
        steps.push(StepAttention {
            step_index: s,
            entries,
        });
    }

    let trace = AttentionTrace { manifest, steps };
    debug_assert!(trace.validate().is_ok());
    Ok((trace, spec.ground_truth()))
}
