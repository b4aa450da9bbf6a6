use std::collections::{HashMap, HashSet};
use std::fmt;

use indexmap::IndexMap;
use serde::Serialize;

use super::{join_ids, Graph, GraphError, Node, NodeId, NodeKind, WeightStore};
use crate::tensor::ops::{conv2d_output_shape, Conv2dGeometry};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node: Option<NodeId>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.node {
            Some(n) => write!(f, "{n}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, node: Option<&NodeId>, message: impl Into<String>) {
        self.violations.push(Violation {
            node: node.cloned(),
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ok() {
            return f.write_str("ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Check structure, attributes, parameters and shapes, collecting every
/// violation instead of stopping at the first.
pub fn validate_graph(g: &Graph, w: &WeightStore) -> ValidationReport {
    let mut report = ValidationReport::default();
    check_structure(g, &mut report);
    let mut owners: HashMap<&str, &NodeId> = HashMap::new();
    for node in g.nodes() {
        check_attrs(node, &mut report);
        let (lo, hi) = node.kind.param_count_range();
        if node.params.len() < lo || node.params.len() > hi {
            report.push(
                Some(&node.id),
                format!(
                    "{} takes {lo}..={hi} parameters, got {}",
                    node.kind.name(),
                    node.params.len()
                ),
            );
        }
        for p in &node.params {
            if !w.contains(p) {
                report.push(Some(&node.id), format!("parameter {p} not found in weight store"));
            }
            if let Some(prev) = owners.insert(p.as_str(), &node.id) {
                report.push(
                    Some(&node.id),
                    format!("parameter {p} is shared with node {prev}; tied weights are not supported"),
                );
            }
        }
    }
    match g.topo_order() {
        Err(GraphError::Cycle(ids)) => report.push(None, format!("cycle through ids {}", join_ids(&ids))),
        Err(e) => report.push(None, e.to_string()),
        Ok(order) => {
            if report.ok() {
                propagate_shapes(g, w, &order, &mut report);
            }
        }
    }
    report
}

/// Graph-only subset of [`validate_graph`]: structure, attributes and
/// acyclicity, without parameters or shapes.
pub fn validate_topology(g: &Graph) -> ValidationReport {
    let mut report = ValidationReport::default();
    check_structure(g, &mut report);
    for node in g.nodes() {
        check_attrs(node, &mut report);
    }
    if let Err(e) = g.topo_order() {
        report.push(None, e.to_string());
    }
    report
}

/// Per-sample output shape of every node, in topological order.
pub fn infer_shapes(g: &Graph, w: &WeightStore) -> Result<IndexMap<NodeId, Vec<usize>>, ValidationReport> {
    let mut report = ValidationReport::default();
    let order = g.topo_order().map_err(|e| {
        let mut r = ValidationReport::default();
        r.push(None, e.to_string());
        r
    })?;
    let shapes = propagate_shapes(g, w, &order, &mut report);
    if report.ok() {
        Ok(shapes)
    } else {
        Err(report)
    }
}

fn check_structure(g: &Graph, report: &mut ValidationReport) {
    let mut slots: HashMap<&str, Vec<usize>> = HashMap::new();
    for e in g.edges() {
        for end in [&e.src, &e.dst] {
            if g.node(end.as_str()).is_none() {
                report.push(None, format!("edge {} -> {} references unknown node {end}", e.src, e.dst));
            }
        }
        slots.entry(e.dst.as_str()).or_default().push(e.slot);
    }
    for node in g.nodes() {
        let mut got = slots.remove(node.id.as_str()).unwrap_or_default();
        got.sort_unstable();
        let want: Vec<usize> = (0..node.input_arity()).collect();
        if got != want {
            report.push(
                Some(&node.id),
                format!(
                    "{} expects input slots {want:?}, found incoming slots {got:?}",
                    node.kind.name()
                ),
            );
        }
    }
    let inputs: HashSet<&NodeId> = g.inputs().iter().collect();
    let outputs: HashSet<&NodeId> = g.outputs().iter().collect();
    for id in g.inputs() {
        if !matches!(g.node(id.as_str()).map(|n| &n.kind), Some(NodeKind::Input { .. })) {
            report.push(Some(id), "listed as graph input but is not an Input node");
        }
    }
    for id in g.outputs() {
        if !matches!(g.node(id.as_str()).map(|n| &n.kind), Some(NodeKind::Output {})) {
            report.push(Some(id), "listed as graph output but is not an Output node");
        }
    }
    for node in g.nodes() {
        match node.kind {
            NodeKind::Input { .. } if !inputs.contains(&node.id) => {
                report.push(Some(&node.id), "Input node missing from graph inputs")
            }
            NodeKind::Output {} if !outputs.contains(&node.id) => {
                report.push(Some(&node.id), "Output node missing from graph outputs")
            }
            _ => {}
        }
    }
    if inputs.len() != g.inputs().len() || outputs.len() != g.outputs().len() {
        report.push(None, "graph inputs or outputs list a node twice");
    }
}

fn check_attrs(node: &Node, report: &mut ValidationReport) {
    let id = Some(&node.id);
    let eps_ok = |eps: f64| eps.is_finite() && eps >= 0.0;
    match &node.kind {
        NodeKind::LayerNorm { eps } => {
            if !eps_ok(*eps) {
                report.push(id, format!("eps must be finite and non-negative, got {eps}"));
            }
        }
        NodeKind::RmsNorm { eps, groups } => {
            if !eps_ok(*eps) {
                report.push(id, format!("eps must be finite and non-negative, got {eps}"));
            }
            if *groups == 0 {
                report.push(id, "groups must be at least 1");
            }
        }
        NodeKind::GroupNorm { groups, eps, axis } => {
            if !eps_ok(*eps) {
                report.push(id, format!("eps must be finite and non-negative, got {eps}"));
            }
            if *groups == 0 {
                report.push(id, "groups must be at least 1");
            }
            if *axis != -1 {
                report.push(id, format!("GroupNorm normalizes the channel-last axis (-1), got axis {axis}"));
            }
        }
        NodeKind::ScalarScale { scale } => {
            if !scale.is_finite() {
                report.push(id, format!("scale must be finite, got {scale}"));
            }
        }
        NodeKind::DropoutInference { p, training, .. } => {
            if *training {
                report.push(id, "training-mode dropout is not supported; only inference-mode dropout is a scale");
            }
            if !(0.0..1.0).contains(p) {
                report.push(id, format!("dropout p must lie in [0, 1), got {p}"));
            }
        }
        NodeKind::ResidualAdd { arity } | NodeKind::Concat { arity } => {
            if *arity < 2 {
                report.push(id, format!("{} needs at least 2 inputs, got arity {arity}", node.kind.name()));
            }
        }
        NodeKind::Conv2d { stride, .. } => {
            if *stride == 0 {
                report.push(id, "stride must be at least 1");
            }
        }
        NodeKind::AuxiliaryCentering { groups } => {
            if *groups == 0 {
                report.push(id, "groups must be at least 1");
            }
        }
        NodeKind::Input { shape, vocab } => {
            if shape.is_empty() || shape.contains(&0) {
                report.push(id, format!("input shape must be non-empty with positive dims, got {shape:?}"));
            }
            if *vocab == Some(0) {
                report.push(id, "vocab must be at least 1");
            }
        }
        _ => {}
    }
    if node.kind.cbwc() == Some(0) {
        report.push(id, "cbwc groups must be at least 1");
    }
}

fn propagate_shapes(
    g: &Graph,
    w: &WeightStore,
    order: &[NodeId],
    report: &mut ValidationReport,
) -> IndexMap<NodeId, Vec<usize>> {
    let mut shapes: IndexMap<NodeId, Vec<usize>> = IndexMap::new();
    for id in order {
        let node = &g.nodes[id];
        let preds = g.predecessors(id.as_str());
        let (lo, hi) = node.kind.param_count_range();
        if preds.len() != node.input_arity() || node.params.len() < lo || node.params.len() > hi {
            report.push(Some(id), "inputs or parameters do not match the node kind");
            continue;
        }
        let ins: Option<Vec<&Vec<usize>>> = preds.iter().map(|p| shapes.get(*p)).collect();
        let Some(ins) = ins else {
            continue;
        };
        let params: Option<Vec<&[usize]>> = node.params.iter().map(|p| w.get(p).map(|t| t.shape())).collect();
        let Some(params) = params else {
            continue;
        };
        let vocab_of_input = preds.first().and_then(|p| match &g.nodes[*p].kind {
            NodeKind::Input { vocab, .. } => *vocab,
            _ => None,
        });
        match output_shape(node, &ins, &params, vocab_of_input) {
            Ok(s) => {
                shapes.insert(id.clone(), s);
            }
            Err(msg) => report.push(Some(id), msg),
        }
    }
    shapes
}

fn divides(groups: usize, len: usize) -> Result<(), String> {
    if groups == 0 || !len.is_multiple_of(groups) {
        return Err(format!("axis length {len} is not divisible by {groups} groups"));
    }
    Ok(())
}

fn last(s: &[usize]) -> usize {
    s.last().copied().unwrap_or(1)
}

fn check_vector(name: &str, shape: &[usize], len: usize) -> Result<(), String> {
    if shape != [len] {
        return Err(format!("{name} shape {shape:?} does not match expected [{len}]"));
    }
    Ok(())
}

fn output_shape(
    node: &Node,
    ins: &[&Vec<usize>],
    params: &[&[usize]],
    vocab_of_input: Option<usize>,
) -> Result<Vec<usize>, String> {
    let x = || ins[0].clone();
    match &node.kind {
        NodeKind::Input { shape, .. } => Ok(shape.clone()),
        NodeKind::Output {}
        | NodeKind::ScalarScale { .. }
        | NodeKind::DropoutInference { .. }
        | NodeKind::Relu {}
        | NodeKind::Softmax {} => Ok(x()),
        NodeKind::AuxiliaryCentering { groups } => {
            divides(*groups, last(ins[0]))?;
            Ok(x())
        }
        NodeKind::LayerNorm { .. } | NodeKind::RmsNorm { .. } | NodeKind::GroupNorm { .. } => {
            let n = last(ins[0]);
            divides(node.kind.norm_groups().unwrap_or(1), n)?;
            for (name, p) in ["gamma", "beta"].iter().zip(params) {
                check_vector(name, p, n)?;
            }
            Ok(x())
        }
        NodeKind::Linear { cbwc } => {
            let wshape = params[0];
            if wshape.len() != 2 || last(ins[0]) != wshape[1] {
                return Err(format!(
                    "weight shape {wshape:?} incompatible with input width {}",
                    last(ins[0])
                ));
            }
            if let Some(b) = params.get(1) {
                check_vector("bias", b, wshape[0])?;
            }
            if let Some(gr) = cbwc {
                divides(*gr, wshape[0])?;
            }
            let mut s = x();
            *s.last_mut().expect("non-empty input shape") = wshape[0];
            Ok(s)
        }
        NodeKind::Conv2d { stride, padding, cbwc } => {
            let geom = Conv2dGeometry {
                stride: *stride,
                padding: *padding,
            };
            let s = conv2d_output_shape(ins[0], params[0], geom).map_err(|e| e.to_string())?;
            if let Some(b) = params.get(1) {
                check_vector("bias", b, params[0][0])?;
            }
            if let Some(gr) = cbwc {
                divides(*gr, params[0][0])?;
            }
            Ok(s)
        }
        NodeKind::RecurrentCell { cbwc } => {
            let (wv, wh) = (params[0], params[1]);
            let (xs, hs) = (ins[0], ins[1]);
            let m = wh.first().copied().unwrap_or(0);
            if wv.len() != 2 || wh.len() != 2 || wh[1] != m || wv[0] != m {
                return Err(format!("recurrent weights {wv:?} and {wh:?} are not [m, n] and [m, m]"));
            }
            if last(xs) != wv[1] || last(hs) != m || xs[..xs.len() - 1] != hs[..hs.len() - 1] {
                return Err(format!("inputs {xs:?} and {hs:?} incompatible with weights {wv:?}, {wh:?}"));
            }
            if let Some(b) = params.get(2) {
                check_vector("bias", b, m)?;
            }
            if let Some(gr) = cbwc {
                divides(*gr, m)?;
            }
            Ok(hs.clone())
        }
        NodeKind::AttentionValueProjection { cbwc } => {
            let (p, xs, v) = (ins[0], ins[1], params[0]);
            if p.len() != 2 || xs.len() != 2 || v.len() != 2 || p[1] != xs[0] || xs[1] != v[0] {
                return Err(format!(
                    "attention weights {p:?}, values {xs:?} and projection {v:?} are incompatible"
                ));
            }
            if let Some(b) = params.get(1) {
                check_vector("bias", b, v[1])?;
            }
            if let Some(gr) = cbwc {
                divides(*gr, v[1])?;
            }
            Ok(vec![p[0], v[1]])
        }
        NodeKind::ResidualAdd { .. } => {
            if ins.iter().any(|s| *s != ins[0]) {
                return Err(format!("residual branches have different shapes {ins:?}"));
            }
            Ok(x())
        }
        NodeKind::Concat { .. } => {
            let lead = &ins[0][..ins[0].len() - 1];
            if ins.iter().any(|s| &s[..s.len() - 1] != lead) {
                return Err(format!("concat inputs disagree on leading dims {ins:?}"));
            }
            let mut s = x();
            *s.last_mut().expect("non-empty input shape") = ins.iter().map(|s| last(s)).sum();
            Ok(s)
        }
        NodeKind::Embedding {} => {
            let table = params[0];
            if table.len() != 2 {
                return Err(format!("embedding table must be 2-D, got {table:?}"));
            }
            match vocab_of_input {
                Some(v) if v <= table[0] => {}
                Some(v) => {
                    return Err(format!("input vocab {v} exceeds embedding table rows {}", table[0]))
                }
                None => return Err("embedding must read a token Input (one with a vocab)".into()),
            }
            let mut s = x();
            s.push(table[1]);
            Ok(s)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Edge;
    use crate::tensor::Tensor;

    fn chain() -> (Graph, WeightStore) {
        let mut b = Graph::builder();
        let x = b.input("x", &[3]);
        let l = b.node("fc", NodeKind::linear(), &["fc.w", "fc.b"], &[&x]);
        b.output("y", &l);
        let mut w = WeightStore::new();
        w.insert("fc.w", Tensor::zeros(&[2, 3]));
        w.insert("fc.b", Tensor::zeros(&[2]));
        (b.build().unwrap(), w)
    }

    #[test]
    fn valid_chain_passes() {
        let (g, w) = chain();
        let r = validate_graph(&g, &w);
        assert!(r.ok(), "{r}");
        assert_eq!(infer_shapes(&g, &w).unwrap()["y"], vec![2]);
    }

    #[test]
    fn cycle_is_a_violation() {
        let mut b = Graph::builder();
        let x = b.input("x", &[2]);
        let a = b.node("a", NodeKind::ResidualAdd { arity: 2 }, &[], &[&x]);
        let r = b.node("r", NodeKind::Relu {}, &[], &[&a]);
        b.output("y", &r);
        let mut g = b.build().unwrap();
        g.edges.push(Edge { src: r, dst: a, slot: 1 });
        let report = validate_graph(&g, &WeightStore::new());
        assert!(report.violations.iter().any(|v| v.message.starts_with("cycle through ids a, r")));
    }

    #[test]
    fn weight_width_mismatch_is_a_shape_violation() {
        let (g, mut w) = chain();
        w.insert("fc.w", Tensor::zeros(&[2, 4]));
        let r = validate_graph(&g, &w);
        assert!(!r.ok());
        assert_eq!(r.violations[0].node, Some(NodeId::new("fc")));
        assert!(r.violations[0].message.contains("incompatible with input width 3"));
    }

    #[test]
    fn reports_every_problem() {
        let mut b = Graph::builder();
        let x = b.input("x", &[4]);
        let d = b.node(
            "drop",
            NodeKind::DropoutInference { p: 0.1, inverted: true, training: true },
            &[],
            &[&x],
        );
        let n = b.node("gn", NodeKind::GroupNorm { groups: 2, eps: -1.0, axis: 0 }, &[], &[&d]);
        let l = b.node("fc", NodeKind::linear(), &["missing"], &[&n]);
        b.output("y", &l);
        let r = validate_graph(&b.build().unwrap(), &WeightStore::new());
        assert_eq!(r.violations.len(), 4, "{r}");
    }

    #[test]
    fn tied_weights_are_rejected() {
        let mut b = Graph::builder();
        let x = b.input("x", &[2]);
        let a = b.node("a", NodeKind::linear(), &["w"], &[&x]);
        let c = b.node("c", NodeKind::linear(), &["w"], &[&a]);
        b.output("y", &c);
        let mut w = WeightStore::new();
        w.insert("w", Tensor::zeros(&[2, 2]));
        let r = validate_graph(&b.build().unwrap(), &w);
        assert!(r.violations.iter().any(|v| v.message.contains("shared with node a")));
    }

    #[test]
    fn missing_slot_is_reported() {
        let (mut g, w) = chain();
        g.edges.retain(|e| e.dst.as_str() != "fc");
        let r = validate_graph(&g, &w);
        assert!(r.violations.iter().any(|v| v.message.contains("expects input slots [0]")));
    }
}
