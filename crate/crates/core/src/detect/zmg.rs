use std::collections::{BTreeSet, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::{DetectError, SafetyVerdict};
use crate::graph::{Graph, NodeClass, NodeId, NodeKind};

/// Subgraph found by backtracking from a normalization through residual
/// and scale nodes. The normalization itself is the root and is not one of
/// the vertices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZeroMeanGraph {
    pub root: NodeId,
    pub vertices: BTreeSet<NodeId>,
    /// Reversed edges `(consumer, producer)` followed while backtracking.
    pub edges: BTreeSet<(NodeId, NodeId)>,
    pub linear_leaves: BTreeSet<NodeId>,
    pub centering_leaves: BTreeSet<NodeId>,
    pub other_leaves: BTreeSet<NodeId>,
}

impl ZeroMeanGraph {
    /// Residual and scale vertices.
    pub fn interior(&self) -> impl Iterator<Item = &NodeId> {
        self.vertices.iter().filter(|v| {
            !self.linear_leaves.contains(*v)
                && !self.centering_leaves.contains(*v)
                && !self.other_leaves.contains(*v)
        })
    }
}

pub fn build_zero_mean_graph(g: &Graph, ln_id: &str) -> Result<ZeroMeanGraph, DetectError> {
    let root = g
        .node(ln_id)
        .ok_or_else(|| DetectError::UnknownNode(NodeId::new(ln_id)))?;
    if !root.kind.is_centering_norm() {
        return Err(DetectError::NotANorm {
            node: root.id.clone(),
            kind: root.kind.name(),
        });
    }
    let mut zmg = ZeroMeanGraph {
        root: root.id.clone(),
        vertices: BTreeSet::new(),
        edges: BTreeSet::new(),
        linear_leaves: BTreeSet::new(),
        centering_leaves: BTreeSet::new(),
        other_leaves: BTreeSet::new(),
    };
    let mut queue: VecDeque<(NodeId, NodeId)> = g
        .predecessors(ln_id)
        .into_iter()
        .map(|p| (root.id.clone(), p.clone()))
        .collect();
    while let Some((consumer, v)) = queue.pop_front() {
        zmg.edges.insert((consumer, v.clone()));
        if !zmg.vertices.insert(v.clone()) {
            continue;
        }
        let node = g.node(v.as_str()).expect("edges reference graph nodes");
        match node.class() {
            NodeClass::Scale | NodeClass::Residual => {
                for p in g.predecessors(v.as_str()) {
                    queue.push_back((v.clone(), p.clone()));
                }
            }
            NodeClass::GeneralLinear => {
                zmg.linear_leaves.insert(v);
            }
            NodeClass::Centering => {
                zmg.centering_leaves.insert(v);
            }
            NodeClass::Other => {
                zmg.other_leaves.insert(v);
            }
        }
    }
    Ok(zmg)
}

/// Layers whose input changes when the output of `source` is shifted by
/// its mean: walk forward through scale and residual nodes and collect the
/// first node of any other class on each path.
pub(crate) fn reached_layers(g: &Graph, source: &str) -> BTreeSet<NodeId> {
    let mut seen = HashSet::new();
    let mut queue: VecDeque<&NodeId> = g.successors(source).into_iter().map(|(d, _)| d).collect();
    let mut out = BTreeSet::new();
    while let Some(n) = queue.pop_front() {
        if !seen.insert(n) {
            continue;
        }
        let node = g.node(n.as_str()).expect("edges reference graph nodes");
        match node.class() {
            NodeClass::Scale | NodeClass::Residual => {
                queue.extend(g.successors(n.as_str()).into_iter().map(|(d, _)| d));
            }
            _ => {
                out.insert(n.clone());
            }
        }
    }
    out
}

/// Whether `node` computes the same output after its input is shifted by a
/// constant on each of `groups` contiguous chunks. Normalizations being
/// folded are accepted as they are.
fn tolerates(g: &Graph, node: &NodeId, groups: usize, folding: &BTreeSet<NodeId>) -> bool {
    let kind = &g.node(node.as_str()).expect("graph node").kind;
    if folding.contains(node) {
        return kind.is_centering_norm();
    }
    match kind {
        NodeKind::LayerNorm { .. } | NodeKind::GroupNorm { .. } => {
            kind.norm_groups().is_some_and(|gn| gn % groups == 0)
        }
        NodeKind::AuxiliaryCentering { groups: a } => a % groups == 0,
        _ => false,
    }
}

/// Layers reached from the perturbed `sources` (node, centering groups)
/// that do not tolerate the perturbation.
pub(crate) fn affected_by<'a>(
    g: &Graph,
    sources: impl IntoIterator<Item = (&'a NodeId, usize)>,
    folding: &BTreeSet<NodeId>,
) -> BTreeSet<NodeId> {
    let mut out = BTreeSet::new();
    for (src, groups) in sources {
        for n in reached_layers(g, src.as_str()) {
            if !tolerates(g, &n, groups, folding) {
                out.insert(n);
            }
        }
    }
    out
}

/// Stricter safety check for folding the root of `zmg` alone: centering its
/// linear leaves may only influence normalizations that remove the shift.
pub fn compute_affected_layers(g: &Graph, zmg: &ZeroMeanGraph) -> SafetyVerdict {
    let groups = g
        .node(zmg.root.as_str())
        .and_then(|n| n.kind.norm_groups())
        .unwrap_or(1);
    let folding = BTreeSet::from([zmg.root.clone()]);
    let affected = affected_by(g, zmg.linear_leaves.iter().map(|l| (l, groups)), &folding);
    SafetyVerdict {
        safe: affected.is_empty(),
        affected,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeKind;

    fn ids(v: &[&str]) -> BTreeSet<NodeId> {
        v.iter().map(|s| NodeId::new(*s)).collect()
    }

    #[test]
    fn single_linear_leaf() {
        let mut b = Graph::builder();
        let x = b.input("x", &[4]);
        let l = b.node("fc", NodeKind::linear(), &["w"], &[&x]);
        let n = b.node("ln", NodeKind::layer_norm(), &[], &[&l]);
        b.output("y", &n);
        let g = b.build().unwrap();
        let z = build_zero_mean_graph(&g, "ln").unwrap();
        assert_eq!(z.vertices, ids(&["fc"]));
        assert_eq!(z.linear_leaves, ids(&["fc"]));
        assert!(compute_affected_layers(&g, &z).safe);
    }

    #[test]
    fn residual_over_scaled_branch() {
        let mut b = Graph::builder();
        let x = b.input("x", &[4]);
        let a = b.node("a", NodeKind::linear(), &["wa"], &[&x]);
        let c = b.node("c", NodeKind::linear(), &["wb"], &[&x]);
        let s = b.node("s", NodeKind::ScalarScale { scale: 0.5 }, &[], &[&c]);
        let r = b.node("r", NodeKind::ResidualAdd { arity: 2 }, &[], &[&a, &s]);
        let n = b.node("ln", NodeKind::layer_norm(), &[], &[&r]);
        b.output("y", &n);
        let g = b.build().unwrap();
        let z = build_zero_mean_graph(&g, "ln").unwrap();
        assert_eq!(z.linear_leaves, ids(&["a", "c"]));
        assert_eq!(z.interior().cloned().collect::<BTreeSet<_>>(), ids(&["r", "s"]));
        assert_eq!(z.edges.len(), 4);
    }

    #[test]
    fn softmax_leaf() {
        let mut b = Graph::builder();
        let x = b.input("x", &[4]);
        let s = b.node("sm", NodeKind::Softmax {}, &[], &[&x]);
        let n = b.node("ln", NodeKind::layer_norm(), &[], &[&s]);
        b.output("y", &n);
        let g = b.build().unwrap();
        let z = build_zero_mean_graph(&g, "ln").unwrap();
        assert_eq!(z.other_leaves, ids(&["sm"]));
        assert!(build_zero_mean_graph(&g, "sm").is_err());
    }

    #[test]
    fn shared_producer_is_visited_once() {
        let mut b = Graph::builder();
        let x = b.input("x", &[4]);
        let l = b.node("fc", NodeKind::linear(), &["w"], &[&x]);
        let r = b.node("r", NodeKind::ResidualAdd { arity: 2 }, &[], &[&l, &l]);
        let n = b.node("ln", NodeKind::layer_norm(), &[], &[&r]);
        b.output("y", &n);
        let g = b.build().unwrap();
        let z = build_zero_mean_graph(&g, "ln").unwrap();
        assert_eq!(z.vertices, ids(&["fc", "r"]));
    }

    #[test]
    fn fan_out_to_relu_is_unsafe() {
        let mut b = Graph::builder();
        let x = b.input("x", &[4]);
        let l = b.node("fc", NodeKind::linear(), &["w"], &[&x]);
        let n = b.node("ln", NodeKind::layer_norm(), &[], &[&l]);
        let r = b.node("act", NodeKind::Relu {}, &[], &[&l]);
        b.output("y1", &n);
        b.output("y2", &r);
        let g = b.build().unwrap();
        let z = build_zero_mean_graph(&g, "ln").unwrap();
        let v = compute_affected_layers(&g, &z);
        assert!(!v.safe);
        assert_eq!(v.affected, ids(&["act"]));
    }

    #[test]
    fn downstream_layer_norm_tolerates_shift_but_rms_does_not() {
        let mut b = Graph::builder();
        let x = b.input("x", &[4]);
        let l = b.node("fc", NodeKind::linear(), &["w"], &[&x]);
        let n = b.node("ln", NodeKind::layer_norm(), &[], &[&l]);
        let other = b.node("ln_other", NodeKind::layer_norm(), &[], &[&l]);
        let rms = b.node("rms", NodeKind::RmsNorm { eps: 1e-5, groups: 1 }, &[], &[&l]);
        b.output("y1", &n);
        b.output("y2", &other);
        b.output("y3", &rms);
        let g = b.build().unwrap();
        let z = build_zero_mean_graph(&g, "ln").unwrap();
        assert_eq!(compute_affected_layers(&g, &z).affected, ids(&["rms"]));
    }
}
