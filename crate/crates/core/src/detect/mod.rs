//! Foldability analysis: which LayerNorm/GroupNorm nodes can become RMSNorm
//! once the general linear layers feeding them are weight-centered.

mod plan;
mod zmg;

pub use plan::{plan_auxiliary_centering, AuxPlan, Insertion};
pub use zmg::{build_zero_mean_graph, compute_affected_layers, ZeroMeanGraph};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cbwc::{centering_spec, grouped_overconstrained, CenteringSpec};
use crate::graph::{
    infer_shapes, model_hash, validate_graph, validate_topology, Graph, NodeClass, NodeId, NodeKind,
    ValidationReport, WeightStore,
};
use crate::tensor::proxy_axis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Strict,
    /// Also plan auxiliary centering insertions for failing normalizations.
    Practical,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Strict => "strict",
            Mode::Practical => "practical",
        })
    }
}

/// Analysis state of one node output.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TensorState {
    pub centered: bool,
    /// Upstream general linear layers whose centering makes this output
    /// zero-mean.
    pub corresponding: BTreeSet<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    FoldableStrict,
    FoldablePractical,
    NotFoldable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyVerdict {
    pub safe: bool,
    /// Layers that the centering would perturb and that do not remove the
    /// perturbation.
    pub affected: BTreeSet<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormEntry {
    pub ln: NodeId,
    pub kind: String,
    pub groups: usize,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub zero_mean_graph: ZeroMeanGraph,
    pub cbwc_targets: BTreeSet<NodeId>,
    /// Leaves after which an auxiliary centering is inserted for this entry.
    pub aux_centering_insertions: BTreeSet<NodeId>,
    pub affected: BTreeSet<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CbwcTarget {
    pub node: NodeId,
    /// Centering groups: the least common multiple of the groups of every
    /// folded normalization this layer feeds.
    pub groups: usize,
    pub spec: CenteringSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_hash: Option<String>,
    pub mode: Mode,
    pub entries: Vec<NormEntry>,
    /// Normalizations to replace by RMSNorm.
    pub foldable: BTreeSet<NodeId>,
    pub cbwc_targets: Vec<CbwcTarget>,
    pub insertions: Vec<Insertion>,
    pub safety: SafetyVerdict,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub norms: usize,
    pub strict_foldable: usize,
    pub practical_foldable: usize,
    pub insertions: usize,
}

impl FoldReport {
    pub fn entry(&self, ln: &str) -> Option<&NormEntry> {
        self.entries.iter().find(|e| e.ln.as_str() == ln)
    }

    pub fn summary(&self) -> Summary {
        let count = |v| self.entries.iter().filter(|e| e.verdict == v).count();
        Summary {
            norms: self.entries.len(),
            strict_foldable: count(Verdict::FoldableStrict),
            practical_foldable: count(Verdict::FoldablePractical),
            insertions: self.insertions.len(),
        }
    }

    /// Nothing would change if this report were applied.
    pub fn is_noop(&self) -> bool {
        self.foldable.is_empty() && self.insertions.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("invalid graph:\n{0}")]
    Invalid(ValidationReport),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {node} is a {kind}, not a LayerNorm or GroupNorm")]
    NotANorm { node: NodeId, kind: &'static str },
}

/// Per-output states from one pass in topological order: linear layers
/// start a centered state naming themselves, centering nodes a centered
/// state with no requirement, scales pass the state through, residual sums
/// AND the flags and merge the sets, anything else resets.
pub fn propagate_states(g: &Graph) -> Result<BTreeMap<NodeId, TensorState>, DetectError> {
    let order = g.topo_order().map_err(|e| {
        let mut r = ValidationReport::default();
        r.violations.push(crate::graph::Violation {
            node: None,
            message: e.to_string(),
        });
        DetectError::Invalid(r)
    })?;
    let mut states: BTreeMap<NodeId, TensorState> = BTreeMap::new();
    for id in order {
        let node = g.node(id.as_str()).expect("topo order lists graph nodes");
        let preds = g.predecessors(id.as_str());
        let state = match node.class() {
            NodeClass::GeneralLinear => TensorState {
                centered: true,
                corresponding: BTreeSet::from([id.clone()]),
            },
            NodeClass::Centering => TensorState {
                centered: true,
                corresponding: BTreeSet::new(),
            },
            NodeClass::Scale => states[preds[0]].clone(),
            NodeClass::Residual => TensorState {
                centered: preds.iter().all(|p| states[*p].centered),
                corresponding: preds
                    .iter()
                    .flat_map(|p| states[*p].corresponding.iter().cloned())
                    .collect(),
            },
            NodeClass::Other => TensorState::default(),
        };
        states.insert(id, state);
    }
    Ok(states)
}

fn join(ids: &BTreeSet<NodeId>) -> String {
    ids.iter().map(NodeId::as_str).collect::<Vec<_>>().join(", ")
}

struct NormAnalysis {
    zmg: ZeroMeanGraph,
    kind: &'static str,
    groups: usize,
    strict_reason: Option<String>,
}

/// Detect foldable normalizations. Entries and sets are ordered by node id,
/// so the report does not depend on node order in the graph.
pub fn detect_foldable(g: &Graph, mode: Mode) -> Result<FoldReport, DetectError> {
    let validation = validate_topology(g);
    if !validation.ok() {
        return Err(DetectError::Invalid(validation));
    }
    let states = propagate_states(g)?;
    let mut norms: Vec<&NodeId> = g
        .nodes()
        .filter(|n| n.kind.is_centering_norm())
        .map(|n| &n.id)
        .collect();
    norms.sort();

    let mut analyses: BTreeMap<NodeId, NormAnalysis> = BTreeMap::new();
    for id in norms {
        let node = g.node(id.as_str()).expect("listed above");
        let zmg = build_zero_mean_graph(g, id.as_str())?;
        let groups = node.kind.norm_groups().unwrap_or(1);
        let incoming = &states[g.predecessors(id.as_str())[0]];
        debug_assert_eq!(incoming.centered, zmg.other_leaves.is_empty());
        let clashing: BTreeSet<NodeId> = zmg
            .centering_leaves
            .iter()
            .filter(|c| match g.node(c.as_str()).map(|n| &n.kind) {
                Some(NodeKind::AuxiliaryCentering { groups: a }) => a % groups != 0,
                _ => true,
            })
            .cloned()
            .collect();
        let strict_reason = if !incoming.centered {
            Some(format!("zero-mean graph has non-linear leaves: {}", join(&zmg.other_leaves)))
        } else if !clashing.is_empty() {
            Some(format!(
                "centering leaves {} do not center each of the {groups} groups",
                join(&clashing)
            ))
        } else {
            None
        };
        analyses.insert(
            id.clone(),
            NormAnalysis {
                zmg,
                kind: node.kind.name(),
                groups,
                strict_reason,
            },
        );
    }

    let strict: BTreeSet<NodeId> = analyses
        .iter()
        .filter(|(_, a)| a.strict_reason.is_none())
        .map(|(id, _)| id.clone())
        .collect();
    let plan = match mode {
        Mode::Strict => AuxPlan::default(),
        Mode::Practical => {
            let failing: Vec<ZeroMeanGraph> = analyses
                .values()
                .filter(|a| a.strict_reason.is_some() && a.zmg.centering_leaves.is_empty())
                .map(|a| a.zmg.clone())
                .collect();
            plan_auxiliary_centering(g, &failing, &strict)
        }
    };
    let foldable: BTreeSet<NodeId> = strict.union(&plan.rescued).cloned().collect();

    let mut target_groups: BTreeMap<NodeId, usize> = BTreeMap::new();
    for id in &foldable {
        let a = &analyses[id];
        for t in &a.zmg.linear_leaves {
            let e = target_groups.entry(t.clone()).or_insert(1);
            *e = num_integer::lcm(*e, a.groups);
        }
    }
    let inserted_after: BTreeMap<&NodeId, &Insertion> =
        plan.insertions.iter().map(|i| (&i.after, i)).collect();

    let mut entries = Vec::with_capacity(analyses.len());
    let mut affected_all = BTreeSet::new();
    for (id, a) in &analyses {
        let aux: BTreeSet<NodeId> = a
            .zmg
            .other_leaves
            .iter()
            .filter(|l| plan.rescued.contains(id) && inserted_after.contains_key(l))
            .cloned()
            .collect();
        let (verdict, reason) = if strict.contains(id) {
            (Verdict::FoldableStrict, None)
        } else if plan.rescued.contains(id) {
            (Verdict::FoldablePractical, None)
        } else {
            let mut r = a.strict_reason.clone().unwrap_or_default();
            if mode == Mode::Practical {
                r.push_str("; no accepted auxiliary centering plan covers it");
            }
            (Verdict::NotFoldable, Some(r))
        };
        let (targets, affected) = if foldable.contains(id) {
            let sources = a
                .zmg
                .linear_leaves
                .iter()
                .map(|t| (t, target_groups[t]))
                .chain(aux.iter().map(|l| (l, 1)));
            let affected = zmg::affected_by(g, sources, &foldable);
            (a.zmg.linear_leaves.clone(), affected)
        } else {
            (BTreeSet::new(), BTreeSet::new())
        };
        affected_all.extend(affected.iter().cloned());
        entries.push(NormEntry {
            ln: id.clone(),
            kind: a.kind.to_string(),
            groups: a.groups,
            verdict,
            reason,
            zero_mean_graph: a.zmg.clone(),
            cbwc_targets: targets,
            aux_centering_insertions: aux,
            affected,
        });
    }

    let cbwc_targets = target_groups
        .into_iter()
        .map(|(node, groups)| {
            let n = g.node(node.as_str()).expect("targets are graph nodes");
            let spec = centering_spec(n, groups).expect("targets are general linear layers");
            CbwcTarget { node, groups, spec }
        })
        .collect();

    Ok(FoldReport {
        model_hash: None,
        mode,
        entries,
        foldable,
        cbwc_targets,
        insertions: plan.insertions,
        safety: SafetyVerdict {
            safe: affected_all.is_empty(),
            affected: affected_all,
        },
        warnings: Vec::new(),
    })
}

#[derive(Debug, Error)]
pub enum AnalyzeError {
    #[error("invalid model:\n{0}")]
    Invalid(ValidationReport),
    #[error(transparent)]
    Detect(#[from] DetectError),
}

/// Validate a model, run detection and attach the model hash plus warnings
/// that need shapes.
pub fn analyze(g: &Graph, w: &WeightStore, mode: Mode) -> Result<FoldReport, AnalyzeError> {
    let validation = validate_graph(g, w);
    if !validation.ok() {
        return Err(AnalyzeError::Invalid(validation));
    }
    let mut report = detect_foldable(g, mode)?;
    report.model_hash = Some(model_hash(g, w));
    let shapes = infer_shapes(g, w).map_err(AnalyzeError::Invalid)?;
    for e in &report.entries {
        let pred = g.predecessors(e.ln.as_str())[0];
        let n = shapes[pred].last().copied().unwrap_or(1);
        if n / e.groups == 1 {
            report.warnings.push(format!(
                "{} {} normalizes slices of length 1; centering makes its output zero",
                e.kind, e.ln
            ));
        }
    }
    for t in &report.cbwc_targets {
        if t.groups <= 1 {
            continue;
        }
        let node = g.node(t.node.as_str()).expect("target node");
        let weight = w.get(&node.params[0]).expect("validated parameters");
        let len = weight.shape()[proxy_axis(&node.kind, weight)];
        if grouped_overconstrained(len, t.groups) {
            report.warnings.push(format!(
                "centering {} with {} groups over {len} outputs zeroes the layer",
                t.node, t.groups
            ));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[&str]) -> BTreeSet<NodeId> {
        v.iter().map(|s| NodeId::new(*s)).collect()
    }

    #[test]
    fn relu_blocks_folding() {
        let mut b = Graph::builder();
        let x = b.input("x", &[4]);
        let l = b.node("fc", NodeKind::linear(), &["w"], &[&x]);
        let r = b.node("act", NodeKind::Relu {}, &[], &[&l]);
        let n = b.node("ln", NodeKind::layer_norm(), &[], &[&r]);
        b.output("y", &n);
        let g = b.build().unwrap();
        let rep = detect_foldable(&g, Mode::Strict).unwrap();
        assert_eq!(rep.entries[0].verdict, Verdict::NotFoldable);
        assert!(rep.foldable.is_empty());
        // one rescue for one insertion is not worth it
        let rep = detect_foldable(&g, Mode::Practical).unwrap();
        assert_eq!(rep.entries[0].verdict, Verdict::NotFoldable);
        assert!(rep.insertions.is_empty());
    }

    #[test]
    fn concat_blocks_folding() {
        let mut b = Graph::builder();
        let x = b.input("x", &[4]);
        let a = b.node("a", NodeKind::linear(), &["wa"], &[&x]);
        let c = b.node("c", NodeKind::linear(), &["wc"], &[&x]);
        let cat = b.node("cat", NodeKind::Concat { arity: 2 }, &[], &[&a, &c]);
        let n = b.node("ln", NodeKind::layer_norm(), &[], &[&cat]);
        b.output("y", &n);
        let g = b.build().unwrap();
        let rep = detect_foldable(&g, Mode::Strict).unwrap();
        assert_eq!(rep.entries[0].verdict, Verdict::NotFoldable);
        assert_eq!(rep.entries[0].zero_mean_graph.other_leaves, ids(&["cat"]));
    }

    #[test]
    fn residual_state_is_and_of_branches() {
        let mut b = Graph::builder();
        let x = b.input("x", &[4]);
        let a = b.node("a", NodeKind::linear(), &["wa"], &[&x]);
        let c = b.node("c", NodeKind::linear(), &["wc"], &[&x]);
        let r1 = b.node("r1", NodeKind::ResidualAdd { arity: 2 }, &[], &[&a, &c]);
        let r2 = b.node("r2", NodeKind::ResidualAdd { arity: 2 }, &[], &[&a, &x]);
        b.output("y1", &r1);
        b.output("y2", &r2);
        let st = propagate_states(&b.build().unwrap()).unwrap();
        assert!(st[&NodeId::new("r1")].centered);
        assert_eq!(st[&NodeId::new("r1")].corresponding, ids(&["a", "c"]));
        assert!(!st[&NodeId::new("r2")].centered);
        assert_eq!(st[&NodeId::new("r2")].corresponding, ids(&["a"]));
    }

    #[test]
    fn auxiliary_centering_leaf_needs_no_target() {
        let mut b = Graph::builder();
        let x = b.input("x", &[4]);
        let c = b.node("c", NodeKind::AuxiliaryCentering { groups: 1 }, &[], &[&x]);
        let n = b.node("ln", NodeKind::layer_norm(), &[], &[&c]);
        b.output("y", &n);
        let rep = detect_foldable(&b.build().unwrap(), Mode::Strict).unwrap();
        assert_eq!(rep.foldable, ids(&["ln"]));
        assert!(rep.cbwc_targets.is_empty());
        assert!(rep.safety.safe);
    }

    #[test]
    fn group_norm_targets_take_group_count() {
        let mut b = Graph::builder();
        let x = b.input("x", &[4]);
        let l = b.node("fc", NodeKind::linear(), &["w"], &[&x]);
        let n = b.node("gn", NodeKind::GroupNorm { groups: 2, eps: 1e-5, axis: -1 }, &[], &[&l]);
        b.output("y", &n);
        let rep = detect_foldable(&b.build().unwrap(), Mode::Strict).unwrap();
        assert_eq!(rep.cbwc_targets.len(), 1);
        assert_eq!(rep.cbwc_targets[0].groups, 2);
        assert_eq!(rep.cbwc_targets[0].spec.family, crate::cbwc::CenteringFamily::GroupedColumns(2));
    }

    #[test]
    fn mismatched_centering_groups_block_group_norm() {
        let mut b = Graph::builder();
        let x = b.input("x", &[4]);
        let c = b.node("c", NodeKind::AuxiliaryCentering { groups: 1 }, &[], &[&x]);
        let n = b.node("gn", NodeKind::GroupNorm { groups: 2, eps: 1e-5, axis: -1 }, &[], &[&c]);
        b.output("y", &n);
        let rep = detect_foldable(&b.build().unwrap(), Mode::Practical).unwrap();
        assert_eq!(rep.entries[0].verdict, Verdict::NotFoldable);
        assert!(rep.entries[0].reason.as_ref().unwrap().contains("do not center each of the 2 groups"));
    }

    #[test]
    fn invalid_graph_is_rejected() {
        let mut b = Graph::builder();
        let x = b.input("x", &[4]);
        let d = b.node(
            "drop",
            NodeKind::DropoutInference { p: 0.1, inverted: true, training: true },
            &[],
            &[&x],
        );
        let n = b.node("ln", NodeKind::layer_norm(), &[], &[&d]);
        b.output("y", &n);
        let g = b.build().unwrap();
        assert!(matches!(detect_foldable(&g, Mode::Strict), Err(DetectError::Invalid(_))));
    }
}
