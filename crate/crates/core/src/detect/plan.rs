use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::zmg::{affected_by, ZeroMeanGraph};
use crate::graph::{Graph, NodeId};

/// An auxiliary centering node placed on every out-edge of `after`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Insertion {
    pub after: NodeId,
    /// Id of the inserted node.
    pub node: NodeId,
    /// Edges `(consumer, slot)` that will read the inserted node.
    pub consumers: Vec<(NodeId, usize)>,
    /// Normalizations this insertion helps make foldable.
    pub rescues: BTreeSet<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AuxPlan {
    pub insertions: Vec<Insertion>,
    pub rescued: BTreeSet<NodeId>,
}

impl AuxPlan {
    pub fn net_benefit(&self) -> i64 {
        self.rescued.len() as i64 - self.insertions.len() as i64
    }
}

/// Greedy choice of auxiliary centering insertions for normalizations that
/// failed strict detection.
///
/// Candidates are the non-linear leaves of the failing zero-mean graphs,
/// ordered by how many failing normalizations contain them (then by id).
/// Each prefix of that order is scored as rescued normalizations minus
/// insertions; the best prefix is kept if it scores at least 1. A
/// normalization counts as rescued when all its non-linear leaves are
/// covered and the perturbation from its centering reaches only layers
/// that remove it.
pub fn plan_auxiliary_centering(
    g: &Graph,
    failing: &[ZeroMeanGraph],
    foldable: &BTreeSet<NodeId>,
) -> AuxPlan {
    let rescuable: Vec<&ZeroMeanGraph> = failing
        .iter()
        .filter(|z| !z.other_leaves.is_empty() && root_groups(g, z) == 1)
        .collect();
    let mut counts: BTreeMap<&NodeId, usize> = BTreeMap::new();
    for z in &rescuable {
        for leaf in &z.other_leaves {
            *counts.entry(leaf).or_default() += 1;
        }
    }
    let mut candidates: Vec<&NodeId> = counts.keys().copied().collect();
    candidates.sort_by(|a, b| counts[b].cmp(&counts[a]).then_with(|| a.cmp(b)));

    let mut best: (i64, usize, BTreeSet<NodeId>) = (0, 0, BTreeSet::new());
    for k in 1..=candidates.len() {
        let chosen: BTreeSet<&NodeId> = candidates[..k].iter().copied().collect();
        let covered: BTreeSet<NodeId> = rescuable
            .iter()
            .filter(|z| z.other_leaves.iter().all(|l| chosen.contains(l)))
            .map(|z| z.root.clone())
            .collect();
        let rescued = keep_safe(g, &rescuable, covered, foldable);
        let net = rescued.len() as i64 - k as i64;
        if net > best.0 {
            best = (net, k, rescued);
        }
    }
    let (net, k, rescued) = best;
    if net < 1 {
        return AuxPlan::default();
    }

    let mut taken: BTreeSet<NodeId> = BTreeSet::new();
    let mut insertions = Vec::new();
    for leaf in &candidates[..k] {
        let rescues: BTreeSet<NodeId> = rescuable
            .iter()
            .filter(|z| rescued.contains(&z.root) && z.other_leaves.contains(*leaf))
            .map(|z| z.root.clone())
            .collect();
        if rescues.is_empty() {
            continue;
        }
        let mut consumers: Vec<(NodeId, usize)> = g
            .successors(leaf.as_str())
            .into_iter()
            .map(|(d, s)| (d.clone(), s))
            .collect();
        consumers.sort();
        let node = fresh_aux_id(g, leaf, &taken);
        taken.insert(node.clone());
        insertions.push(Insertion {
            after: (*leaf).clone(),
            node,
            consumers,
            rescues,
        });
    }
    AuxPlan { insertions, rescued }
}

fn root_groups(g: &Graph, z: &ZeroMeanGraph) -> usize {
    g.node(z.root.as_str())
        .and_then(|n| n.kind.norm_groups())
        .unwrap_or(1)
}

/// Drop candidates whose centering would disturb a layer that does not
/// remove the shift, until the remaining set is stable.
fn keep_safe(
    g: &Graph,
    rescuable: &[&ZeroMeanGraph],
    mut rescued: BTreeSet<NodeId>,
    foldable: &BTreeSet<NodeId>,
) -> BTreeSet<NodeId> {
    loop {
        let folding: BTreeSet<NodeId> = foldable.union(&rescued).cloned().collect();
        let keep: BTreeSet<NodeId> = rescuable
            .iter()
            .filter(|z| rescued.contains(&z.root))
            .filter(|z| {
                let sources = z.linear_leaves.iter().chain(&z.other_leaves).map(|n| (n, 1));
                affected_by(g, sources, &folding).is_empty()
            })
            .map(|z| z.root.clone())
            .collect();
        if keep.len() == rescued.len() {
            return keep;
        }
        rescued = keep;
    }
}

fn fresh_aux_id(g: &Graph, leaf: &NodeId, taken: &BTreeSet<NodeId>) -> NodeId {
    let base = format!("{leaf}__aux_center");
    std::iter::once(base.clone())
        .chain((2..).map(|i| format!("{base}_{i}")))
        .map(NodeId::new)
        .find(|c| g.node(c.as_str()).is_none() && !taken.contains(c))
        .expect("unbounded search")
}
