use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::graph::{Cluster, Clustering};
use super::scores::HeadScores;
use super::{ProfileConfig, ProfileError, Role};
use crate::scalar::Scalar;
use crate::trace::HeadId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadRecord<T = f64> {
    pub layer: u32,
    pub head: u32,
    pub s_stable: T,
    pub s_sim: T,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_id: Option<u32>,
}

impl<T> HeadRecord<T> {
    pub fn id(&self) -> HeadId {
        HeadId::new(self.layer, self.head)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleCounts {
    pub volatile: usize,
    pub anchor: usize,
    pub pivot: usize,
    pub satellite: usize,
}

impl RoleCounts {
    pub fn get(&self, role: Role) -> usize {
        match role {
            Role::Volatile => self.volatile,
            Role::Anchor => self.anchor,
            Role::Pivot => self.pivot,
            Role::Satellite => self.satellite,
        }
    }

    fn bump(&mut self, role: Role) {
        match role {
            Role::Volatile => self.volatile += 1,
            Role::Anchor => self.anchor += 1,
            Role::Pivot => self.pivot += 1,
            Role::Satellite => self.satellite += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.volatile + self.anchor + self.pivot + self.satellite
    }
}

/// Role of every head plus the clusters they form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyResult<T = f64> {
    pub tau_stable: T,
    pub tau_sim: T,
    /// One record per head in `(layer, head)` order.
    pub heads: Vec<HeadRecord<T>>,
    pub clusters: Vec<Cluster>,
    pub role_counts: RoleCounts,
}

impl<T: Scalar> TaxonomyResult<T> {
    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn record(&self, id: HeadId) -> Option<&HeadRecord<T>> {
        self.heads
            .binary_search_by(|r| r.id().cmp(&id))
            .ok()
            .map(|i| &self.heads[i])
    }

    pub fn role_of(&self, id: HeadId) -> Option<Role> {
        self.record(id).map(|r| r.role)
    }

    pub fn with_role(&self, role: Role) -> BTreeSet<HeadId> {
        self.heads
            .iter()
            .filter(|r| r.role == role)
            .map(HeadRecord::id)
            .collect()
    }

    /// `s_sim < tau_sim`.
    pub fn unique(&self) -> BTreeSet<HeadId> {
        self.heads
            .iter()
            .filter(|r| r.s_sim < self.tau_sim)
            .map(HeadRecord::id)
            .collect()
    }

    /// `s_sim >= tau_sim`.
    pub fn similar(&self) -> BTreeSet<HeadId> {
        self.heads
            .iter()
            .filter(|r| r.s_sim >= self.tau_sim)
            .map(HeadRecord::id)
            .collect()
    }

    /// Volatile and pivot heads.
    pub fn full(&self) -> BTreeSet<HeadId> {
        self.heads
            .iter()
            .filter(|r| r.role.is_full())
            .map(HeadRecord::id)
            .collect()
    }

    /// Anchor and satellite heads.
    pub fn comp(&self) -> BTreeSet<HeadId> {
        self.heads
            .iter()
            .filter(|r| r.role.is_compressed())
            .map(HeadRecord::id)
            .collect()
    }

    pub fn cluster(&self, id: u32) -> Option<&Cluster> {
        self.clusters.iter().find(|c| c.id == id)
    }

    /// Checks the role partition, cluster labelling and counts.
    pub fn validate(&self) -> Result<(), ProfileError> {
        let bad = |m: String| Err(ProfileError::Taxonomy(m));
        if self.heads.windows(2).any(|w| w[0].id() >= w[1].id()) {
            return bad("head records must be sorted and unique".into());
        }
        let mut counts = RoleCounts::default();
        for r in &self.heads {
            counts.bump(r.role);
            let clustered = matches!(r.role, Role::Pivot | Role::Satellite);
            if clustered != r.cluster_id.is_some() {
                return bad(format!(
                    "head {} role {:?} with cluster {:?}",
                    r.id(),
                    r.role,
                    r.cluster_id
                ));
            }
        }
        if counts != self.role_counts {
            return bad("role counts do not match head records".into());
        }
        let mut seen = BTreeSet::new();
        for c in &self.clusters {
            for m in c.members() {
                if !seen.insert(m) {
                    return bad(format!("head {} in more than one cluster", m));
                }
                if m.layer != c.pivot.layer {
                    return bad(format!("cluster {} spans layers", c.id));
                }
            }
            let pivot = self
                .record(c.pivot)
                .ok_or_else(|| ProfileError::MissingHead(c.pivot))?;
            if pivot.role != Role::Pivot || pivot.cluster_id != Some(c.id) {
                return bad(format!("cluster {} pivot {} mislabelled", c.id, c.pivot));
            }
            for &s in &c.satellites {
                let rec = self.record(s).ok_or(ProfileError::MissingHead(s))?;
                if rec.role != Role::Satellite || rec.cluster_id != Some(c.id) {
                    return bad(format!("cluster {} satellite {} mislabelled", c.id, s));
                }
            }
        }
        let clustered = self.heads.iter().filter(|r| r.cluster_id.is_some()).count();
        if clustered != seen.len() {
            return bad("a clustered head is missing from the cluster list".into());
        }
        Ok(())
    }
}

/// Labels clustered heads pivot/satellite and the rest anchor (stable) or
/// volatile.
pub fn assign_roles<T: Scalar>(
    scores: &[HeadScores<T>],
    clustering: &Clustering,
    config: &ProfileConfig<T>,
) -> Result<TaxonomyResult<T>, ProfileError> {
    config.validate()?;
    let by_head: BTreeMap<HeadId, &HeadScores<T>> = scores.iter().map(|s| (s.head, s)).collect();

    let mut assigned: BTreeMap<HeadId, (Role, Option<u32>)> = BTreeMap::new();
    for c in &clustering.clusters {
        assigned.insert(c.pivot, (Role::Pivot, Some(c.id)));
        for &s in &c.satellites {
            assigned.insert(s, (Role::Satellite, Some(c.id)));
        }
    }
    for &h in &clustering.unassigned {
        let s = by_head.get(&h).ok_or(ProfileError::MissingHead(h))?;
        let role = if s.s_stable >= config.tau_stable {
            Role::Anchor
        } else {
            Role::Volatile
        };
        assigned.insert(h, (role, None));
    }

    let mut role_counts = RoleCounts::default();
    let mut heads = Vec::with_capacity(assigned.len());
    for (h, (role, cluster_id)) in assigned {
        let s = by_head.get(&h).ok_or(ProfileError::MissingHead(h))?;
        role_counts.bump(role);
        heads.push(HeadRecord {
            layer: h.layer,
            head: h.head,
            s_stable: s.s_stable,
            s_sim: s.s_sim,
            role,
            cluster_id,
        });
    }
    if heads.len() != scores.len() {
        return Err(ProfileError::Dimension(format!(
            "clustering covers {} heads, scores cover {}",
            heads.len(),
            scores.len()
        )));
    }

    let result = TaxonomyResult {
        tau_stable: config.tau_stable,
        tau_sim: config.tau_sim,
        heads,
        clusters: clustering.clusters.clone(),
        role_counts,
    };
    result.validate()?;
    Ok(result)
}
