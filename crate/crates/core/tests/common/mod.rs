//! Independent reference implementations and trace suites shared by the
//! integration tests. Nothing here calls into the library's metric or engine
//! code; only plain data types are shared.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashSet};

use headkv::engine::{EngineConfig, PolicyVariant};
use headkv::trace::{
    generate_synthetic, ClusterSpec, DriftEvent, Entry, GroundTruth, HeadArchetype, SynthSpec,
};
use headkv::{AttentionTrace, BudgetPlan, HeadId, TaxonomyResult};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// naive metrics

/// Top-`k` non-padding indices by score descending, index ascending.
pub fn naive_topk(entries: &[Entry], k: usize) -> HashSet<u32> {
    let mut v: Vec<(f32, u32)> = entries
        .iter()
        .filter(|e| e.index != u32::MAX)
        .map(|e| (e.score, e.index))
        .collect();
    // selection sort keeps this obviously correct
    let mut out = HashSet::new();
    while out.len() < k && !v.is_empty() {
        let mut best = 0;
        for i in 1..v.len() {
            let (s, ix) = v[i];
            let (bs, bix) = v[best];
            if s > bs || (s == bs && ix < bix) {
                best = i;
            }
        }
        out.insert(v.remove(best).1);
    }
    out
}

pub fn naive_overlap(a: &HashSet<u32>, b: &HashSet<u32>) -> f64 {
    let inter = a.iter().filter(|x| b.contains(x)).count();
    inter as f64 / a.len().min(b.len()) as f64
}

pub fn naive_median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn head_at(trace: &AttentionTrace, step: usize, layer: u32, head: u32) -> &[Entry] {
    let k = trace.manifest.trace_topk as usize;
    let slot = (layer * trace.manifest.heads_per_layer + head) as usize;
    &trace.steps[step].entries[slot * k..(slot + 1) * k]
}

pub fn naive_stability(trace: &AttentionTrace, layer: u32, head: u32, k: usize) -> f64 {
    let base = naive_topk(head_at(trace, 0, layer, head), k);
    let overlaps: Vec<f64> = (1..trace.steps.len())
        .map(|t| naive_overlap(&naive_topk(head_at(trace, t, layer, head), k), &base))
        .collect();
    naive_median(&overlaps)
}

pub fn naive_similarity(trace: &AttentionTrace, layer: u32, head: u32, k: usize) -> f64 {
    let per_layer = trace.manifest.heads_per_layer;
    if per_layer == 1 {
        return 0.0;
    }
    let maxima: Vec<f64> = (1..trace.steps.len())
        .map(|t| {
            let own = naive_topk(head_at(trace, t, layer, head), k);
            (0..per_layer)
                .filter(|&p| p != head)
                .map(|p| naive_overlap(&own, &naive_topk(head_at(trace, t, layer, p), k)))
                .fold(0.0, f64::max)
        })
        .collect();
    naive_median(&maxima)
}

pub fn naive_layer_matrix(trace: &AttentionTrace, step: usize, k: usize) -> Vec<Vec<f64>> {
    let layers = trace.manifest.num_layers;
    let per_layer = trace.manifest.heads_per_layer;
    let mut out = vec![vec![0.0; layers as usize]; layers as usize];
    for i in 0..layers {
        for j in 0..layers {
            let mut sum = 0.0;
            for h in 0..per_layer {
                let own = naive_topk(head_at(trace, step, i, h), k);
                let mut best = 0.0f64;
                for g in 0..per_layer {
                    if i == j && g == h {
                        continue;
                    }
                    let other = naive_topk(head_at(trace, step, j, g), k);
                    if own.is_empty() || other.is_empty() {
                        continue;
                    }
                    best = best.max(naive_overlap(&own, &other));
                }
                sum += best;
            }
            out[i as usize][j as usize] = sum / per_layer as f64;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// straight-line replay of the inference loop

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayEvent {
    pub trigger_step: u32,
    pub pivot: HeadId,
    /// `(satellite, fetched indices ascending)`.
    pub fetches: Vec<(HeadId, Vec<u32>)>,
    pub completion_step: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayLog {
    pub events: Vec<ReplayEvent>,
    /// Final resident positions per head.
    pub gpu: BTreeMap<HeadId, BTreeSet<u32>>,
    pub bytes: u64,
}

/// Replays prefill selection, pivot monitoring at window boundaries and
/// satellite refresh, with transfers landing FIFO over a single link.
pub fn reference_replay(
    trace: &AttentionTrace,
    taxonomy: &TaxonomyResult,
    plan: &BudgetPlan,
    cfg: &EngineConfig,
) -> ReplayLog {
    let m = &trace.manifest;
    let l = m.prefill_len as usize;
    let big_t = m.decode_steps;
    let w = cfg.window as u32;
    let l_base_int = plan.base_length.round() as usize;

    // 1. prefill: role lookup and per-head capacity
    let mut role = BTreeMap::new();
    let mut cap = BTreeMap::new();
    for rec in &taxonomy.heads {
        let id = HeadId::new(rec.layer, rec.head);
        role.insert(id, rec.role);
        if rec.role.is_compressed() {
            let c = if cfg.policy_variant == PolicyVariant::NoAllocation {
                l_base_int
            } else {
                plan.lengths
                    .iter()
                    .find(|h| h.layer == rec.layer && h.head == rec.head)
                    .unwrap()
                    .length
            };
            cap.insert(id, c);
        }
    }
    let mut dynamic: BTreeMap<HeadId, HashSet<u32>> = cap
        .iter()
        .map(|(&id, &c)| (id, naive_topk(head_at(trace, 0, id.layer, id.head), c)))
        .collect();

    // 2. pivot baselines
    struct Pivot {
        id: HeadId,
        sats: Vec<HeadId>,
        base_len: usize,
        base: HashSet<u32>,
        buf: Vec<f64>,
    }
    let mut pivots: Vec<Pivot> = taxonomy
        .clusters
        .iter()
        .map(|c| {
            let pre = head_at(trace, 0, c.pivot.layer, c.pivot.head);
            let recorded = pre.iter().filter(|e| e.index != u32::MAX).count();
            let base_len = l_base_int.min(recorded);
            Pivot {
                id: c.pivot,
                sats: c.satellites.clone(),
                base_len,
                base: naive_topk(pre, base_len),
                buf: Vec::new(),
            }
        })
        .collect();

    // 3. decode loop
    let mut pending: Vec<(u32, HeadId, HashSet<u32>)> = Vec::new();
    let mut events = Vec::new();
    let mut link = 0.0f64;
    let mut bytes_total = 0u64;
    for t in 1..=big_t {
        let mut still = Vec::new();
        for (done, sat, set) in pending.drain(..) {
            if done <= t {
                dynamic.insert(sat, set);
            } else {
                still.push((done, sat, set));
            }
        }
        pending = still;

        if cfg.policy_variant == PolicyVariant::NoRetrieval {
            continue;
        }
        for p in pivots.iter_mut() {
            let attn = head_at(trace, t as usize, p.id.layer, p.id.head);
            let k_t = naive_topk(attn, p.base_len);
            let inter = k_t.iter().filter(|x| p.base.contains(x)).count();
            p.buf.push(inter as f64 / p.base_len as f64);
            if t % w != 0 {
                continue;
            }
            let fire = naive_median(&p.buf) < cfg.tau_drift;
            p.buf.clear();
            if !fire {
                continue;
            }
            let mut fetches = Vec::new();
            let mut n_entries = 0usize;
            for &s in &p.sats {
                let set = naive_topk(attn, cap[&s]);
                let mut sorted: Vec<u32> = set.iter().copied().collect();
                sorted.sort_unstable();
                n_entries += sorted.len();
                fetches.push((s, sorted));
            }
            let bytes = n_entries as u64 * m.bytes_per_kv_entry as u64;
            let start = link.max(t as f64);
            link = start + bytes as f64 / cfg.transfer_bandwidth;
            let completion = (t + cfg.update_delay_steps).max(link.ceil() as u32);
            for (s, idx) in &fetches {
                pending.push((completion, *s, idx.iter().copied().collect()));
            }
            bytes_total += bytes;
            events.push(ReplayEvent {
                trigger_step: t,
                pivot: p.id,
                fetches,
                completion_step: completion,
            });
            if !k_t.is_empty() {
                p.base_len = k_t.len();
                p.base = k_t;
            }
        }
    }

    // 4. final residency
    let seq_len = l + big_t as usize;
    let sinks = cfg.protection.sink_tokens;
    let recent = cfg.protection.recency_window;
    let mut gpu = BTreeMap::new();
    for (&id, r) in &role {
        let set: BTreeSet<u32> = (0..seq_len)
            .filter(|&p| {
                r.is_full() || p < sinks || p + recent >= l || dynamic[&id].contains(&(p as u32))
            })
            .map(|p| p as u32)
            .collect();
        gpu.insert(id, set);
    }
    ReplayLog {
        events,
        gpu,
        bytes: bytes_total,
    }
}

// ---------------------------------------------------------------------------
// trace suites

/// Random small spec mixing all three archetypes.
pub fn random_spec(rng: &mut ChaCha8Rng, seed: u64) -> SynthSpec {
    let num_layers = rng.gen_range(1..=4);
    let heads_per_layer = rng.gen_range(1..=8);
    let prefill_len = rng.gen_range(48..=512);
    let decode_steps = rng.gen_range(1..=50);
    let max_hot = (prefill_len / 3).min(64);
    let mut clusters = Vec::new();
    let mut heads = Vec::new();
    for _ in 0..num_layers {
        let mut left = heads_per_layer;
        while left > 0 {
            if left >= 2 && rng.gen_bool(0.4) {
                let size = rng.gen_range(2..=left);
                clusters.push(ClusterSpec {
                    hot_set: rng.gen_range(4..=max_hot),
                    drift_rate: if rng.gen_bool(0.3) {
                        rng.gen_range(0.0..0.2)
                    } else {
                        0.0
                    },
                });
                let c = clusters.len() as u32 - 1;
                for _ in 0..size {
                    heads.push(HeadArchetype::ClusterMember {
                        cluster: c,
                        agreement: rng.gen_range(0.6..=1.0),
                    });
                }
                left -= size;
            } else {
                let hot_set = rng.gen_range(4..=max_hot);
                heads.push(if rng.gen_bool(0.5) {
                    HeadArchetype::Stable {
                        hot_set,
                        noise: rng.gen_range(0.0..0.4),
                    }
                } else {
                    HeadArchetype::Decaying {
                        hot_set,
                        drift_rate: rng.gen_range(0.05..=1.0),
                    }
                });
                left -= 1;
            }
        }
    }
    SynthSpec {
        model_name: "random".into(),
        num_layers,
        heads_per_layer,
        prefill_len,
        decode_steps,
        trace_topk: 64.min(prefill_len),
        bytes_per_kv_entry: 128,
        heads,
        clusters,
        drift_events: Vec::new(),
        seed,
    }
}

/// Two layers of eight heads with all four roles planted.
///
/// `noise` sets the stable-head swap rate and one minus the cluster agreement.
pub fn taxonomy_spec(seed: u64, noise: f64) -> SynthSpec {
    let stable = HeadArchetype::Stable { hot_set: 48, noise };
    let decaying = HeadArchetype::Decaying {
        hot_set: 48,
        drift_rate: 0.5,
    };
    let member = |cluster| HeadArchetype::ClusterMember {
        cluster,
        agreement: 1.0 - noise,
    };
    SynthSpec {
        model_name: "taxonomy".into(),
        num_layers: 2,
        heads_per_layer: 8,
        prefill_len: 512,
        decode_steps: 40,
        trace_topk: 64,
        bytes_per_kv_entry: 256,
        heads: vec![
            // layer 0
            member(0),
            stable.clone(),
            member(0),
            decaying.clone(),
            member(0),
            stable.clone(),
            member(0),
            decaying.clone(),
            // layer 1
            stable.clone(),
            member(1),
            decaying.clone(),
            member(1),
            stable.clone(),
            member(1),
            stable,
            decaying,
        ],
        clusters: vec![
            ClusterSpec {
                hot_set: 64,
                drift_rate: 0.0,
            },
            ClusterSpec {
                hot_set: 56,
                drift_rate: 0.0,
            },
        ],
        drift_events: Vec::new(),
        seed,
    }
}

/// One cluster (pivot plus three satellites) and a stable background.
/// With `shift_at = Some(t0)` the cluster's whole hot set moves at `t0`.
pub fn drift_spec(seed: u64, shift_at: Option<u32>) -> SynthSpec {
    let member = HeadArchetype::ClusterMember {
        cluster: 0,
        agreement: 1.0,
    };
    let stable = HeadArchetype::Stable {
        hot_set: 16,
        noise: 0.0,
    };
    SynthSpec {
        model_name: "drift".into(),
        num_layers: 2,
        heads_per_layer: 4,
        prefill_len: 256,
        decode_steps: 64,
        trace_topk: 48,
        bytes_per_kv_entry: 256,
        heads: vec![
            member.clone(),
            member.clone(),
            member.clone(),
            member,
            stable.clone(),
            stable.clone(),
            stable.clone(),
            stable,
        ],
        clusters: vec![ClusterSpec {
            hot_set: 40,
            drift_rate: 0.0,
        }],
        drift_events: shift_at
            .map(|step| DriftEvent {
                step,
                heads: vec![HeadId::new(0, 0)],
                fraction: 1.0,
            })
            .into_iter()
            .collect(),
        seed,
    }
}

/// Mixed-stability suite for the ablation comparison.
///
/// Layer 0 holds a four-head cluster whose hot set moves wholesale at `t0`
/// and four fast-decaying heads; layer 1 holds six small stable heads and two
/// decaying heads. Seven full heads leave a base length near `L / 9`, so the
/// stability-weighted split matters: stable heads need only `min_length`
/// entries while the drifting satellites need their whole hot set.
pub fn ablation_spec(seed: u64, t0: u32) -> SynthSpec {
    let member = HeadArchetype::ClusterMember {
        cluster: 0,
        agreement: 1.0,
    };
    let decaying = HeadArchetype::Decaying {
        hot_set: 8,
        drift_rate: 0.5,
    };
    let stable = HeadArchetype::Stable {
        hot_set: 4,
        noise: 0.0,
    };
    SynthSpec {
        model_name: "ablation".into(),
        num_layers: 2,
        heads_per_layer: 8,
        prefill_len: 96,
        decode_steps: 64,
        trace_topk: 32,
        bytes_per_kv_entry: 256,
        heads: vec![
            member.clone(),
            member.clone(),
            member.clone(),
            member,
            decaying.clone(),
            decaying.clone(),
            decaying.clone(),
            decaying.clone(),
            stable.clone(),
            stable.clone(),
            stable.clone(),
            stable.clone(),
            stable.clone(),
            stable,
            decaying.clone(),
            decaying,
        ],
        clusters: vec![ClusterSpec {
            hot_set: 24,
            drift_rate: 0.0,
        }],
        drift_events: vec![DriftEvent {
            step: t0,
            heads: vec![HeadId::new(0, 0)],
            fraction: 1.0,
        }],
        seed,
    }
}

pub fn synth(spec: &SynthSpec) -> (AttentionTrace, GroundTruth) {
    generate_synthetic(spec).expect("valid spec")
}
