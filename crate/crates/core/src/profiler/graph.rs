use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::scores::check_dimensions;
use super::{AdjacencyMode, ProfileConfig, ProfileError};
use crate::metrics::{overlap_coefficient, trace_top_sets, IndexSet, MetricsError};
use crate::scalar::{median, Scalar};
use crate::trace::{AttentionTrace, HeadId};

/// Undirected same-layer similarity graph over all heads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdjacencyGraph {
    pub num_layers: u32,
    pub heads_per_layer: u32,
    adjacency: BTreeMap<HeadId, BTreeSet<HeadId>>,
}

impl AdjacencyGraph {
    pub fn new(num_layers: u32, heads_per_layer: u32) -> Self {
        let adjacency = (0..num_layers)
            .flat_map(|l| (0..heads_per_layer).map(move |h| (HeadId::new(l, h), BTreeSet::new())))
            .collect();
        Self {
            num_layers,
            heads_per_layer,
            adjacency,
        }
    }

    /// Adds an undirected edge. Self-loops and cross-layer edges are rejected.
    pub fn add_edge(&mut self, a: HeadId, b: HeadId) -> bool {
        if a == b || a.layer != b.layer {
            return false;
        }
        if !self.adjacency.contains_key(&a) || !self.adjacency.contains_key(&b) {
            return false;
        }
        let fresh = self.adjacency.get_mut(&a).unwrap().insert(b);
        self.adjacency.get_mut(&b).unwrap().insert(a);
        fresh
    }

    pub fn has_edge(&self, a: HeadId, b: HeadId) -> bool {
        self.adjacency.get(&a).is_some_and(|n| n.contains(&b))
    }

    pub fn neighbors(&self, h: HeadId) -> impl Iterator<Item = HeadId> + '_ {
        self.adjacency.get(&h).into_iter().flatten().copied()
    }

    pub fn heads(&self) -> impl Iterator<Item = HeadId> + '_ {
        self.adjacency.keys().copied()
    }

    /// Edges as `(a, b)` with `a < b`, in order.
    pub fn edges(&self) -> Vec<(HeadId, HeadId)> {
        self.adjacency
            .iter()
            .flat_map(|(&a, n)| n.iter().filter(move |&&b| a < b).map(move |&b| (a, b)))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.values().map(BTreeSet::len).sum::<usize>() / 2
    }
}

/// Pairwise same-layer overlap of one trace, aggregated over time.
/// `sets[step][slot]`; step 0 is prefill and is not used by the median mode.
fn pair_overlaps<T: Scalar>(
    sets: &[Vec<IndexSet>],
    num_layers: u32,
    per_layer: u32,
    mode: AdjacencyMode,
) -> Result<BTreeMap<(HeadId, HeadId), T>, ProfileError> {
    let steps: Vec<&Vec<IndexSet>> = match mode {
        AdjacencyMode::MedianOverSteps => sets.iter().skip(1).collect(),
        AdjacencyMode::SingleStep(s) => vec![sets.get(s).ok_or(MetricsError::StepOutOfRange {
            step: s,
            steps: sets.len(),
        })?],
    };
    if steps.is_empty() {
        return Err(ProfileError::NoDecodeSteps);
    }
    let mut out = BTreeMap::new();
    for layer in 0..num_layers {
        for a in 0..per_layer {
            for b in a + 1..per_layer {
                let sa = (layer * per_layer + a) as usize;
                let sb = (layer * per_layer + b) as usize;
                let series = steps
                    .iter()
                    .map(|step| overlap_coefficient::<T>(&step[sa], &step[sb]))
                    .collect::<Result<Vec<T>, _>>()?;
                out.insert(
                    (HeadId::new(layer, a), HeadId::new(layer, b)),
                    median(&series).expect("nonempty, finite"),
                );
            }
        }
    }
    Ok(out)
}

/// Edge `(h, h')` iff both share a layer and their aggregated pairwise overlap
/// is at least `tau_sim`. `per_step_sets[step][slot]` with prefill at step 0.
pub fn build_adjacency<T: Scalar>(
    per_step_sets: &[Vec<IndexSet>],
    num_layers: u32,
    heads_per_layer: u32,
    tau_sim: T,
    mode: AdjacencyMode,
) -> Result<AdjacencyGraph, ProfileError> {
    if tau_sim < T::zero() || tau_sim > T::one() {
        return Err(ProfileError::Config(format!(
            "tau_sim {} outside [0,1]",
            tau_sim
        )));
    }
    let n = (num_layers * heads_per_layer) as usize;
    if per_step_sets.iter().any(|s| s.len() != n) {
        return Err(ProfileError::Dimension(format!(
            "every step must carry {} head sets",
            n
        )));
    }
    let overlaps = pair_overlaps::<T>(per_step_sets, num_layers, heads_per_layer, mode)?;
    let mut g = AdjacencyGraph::new(num_layers, heads_per_layer);
    for ((a, b), o) in overlaps {
        if o >= tau_sim {
            g.add_edge(a, b);
        }
    }
    Ok(g)
}

/// Adjacency over several calibration traces: pairwise overlaps are averaged
/// across traces before thresholding.
pub fn build_adjacency_from_traces<T: Scalar>(
    traces: &[AttentionTrace],
    config: &ProfileConfig<T>,
) -> Result<AdjacencyGraph, ProfileError> {
    config.validate()?;
    check_dimensions(traces)?;
    let m = &traces[0].manifest;
    let mut sum: BTreeMap<(HeadId, HeadId), T> = BTreeMap::new();
    for t in traces {
        let sets = trace_top_sets(t, config.topk_for(t.manifest.prefill_len as usize))?;
        for (pair, o) in
            pair_overlaps::<T>(&sets, m.num_layers, m.heads_per_layer, config.adjacency)?
        {
            let acc = sum.entry(pair).or_insert_with(T::zero);
            *acc = *acc + o;
        }
    }
    let n = T::from_count(traces.len());
    let mut g = AdjacencyGraph::new(m.num_layers, m.heads_per_layer);
    for ((a, b), total) in sum {
        if total / n >= config.tau_sim {
            g.add_edge(a, b);
        }
    }
    Ok(g)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: u32,
    pub pivot: HeadId,
    pub satellites: Vec<HeadId>,
}

impl Cluster {
    pub fn members(&self) -> impl Iterator<Item = HeadId> + '_ {
        std::iter::once(self.pivot).chain(self.satellites.iter().copied())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Clustering {
    pub clusters: Vec<Cluster>,
    pub unassigned: Vec<HeadId>,
}

/// Greedy star clustering.
///
/// Repeatedly picks the unassigned head with the most unassigned neighbors
/// (ties: lowest `(layer, head)`), makes it a pivot and its unassigned
/// neighbors its satellites, until no unassigned head has an unassigned
/// neighbor.
pub fn greedy_star_cluster(graph: &AdjacencyGraph) -> Clustering {
    let mut unassigned: BTreeSet<HeadId> = graph.heads().collect();
    let mut clusters = Vec::new();
    loop {
        let mut best: Option<(usize, HeadId)> = None;
        for &h in &unassigned {
            let degree = graph
                .neighbors(h)
                .filter(|n| unassigned.contains(n))
                .count();
            // BTreeSet iterates in (layer, head) order, so strict > keeps the lowest on ties
            if degree > 0 && best.map_or(true, |(d, _)| degree > d) {
                best = Some((degree, h));
            }
        }
        let Some((_, pivot)) = best else { break };
        let satellites: Vec<HeadId> = graph
            .neighbors(pivot)
            .filter(|n| unassigned.contains(n))
            .collect();
        unassigned.remove(&pivot);
        for s in &satellites {
            unassigned.remove(s);
        }
        clusters.push(Cluster {
            id: clusters.len() as u32,
            pivot,
            satellites,
        });
    }
    Clustering {
        clusters,
        unassigned: unassigned.into_iter().collect(),
    }
}
