//! Rewrite a model according to a fold report.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cbwc::{center_node, CbwcError};
use crate::detect::{FoldReport, Verdict};
use crate::graph::{
    model_hash, validate_graph, CenteredRecord, Graph, Node, NodeClass, NodeId, NodeKind, Provenance,
    ValidationReport, WeightStore,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FoldStyle {
    /// Replace the stored weights by their centered projection.
    #[default]
    OneShot,
    /// Keep raw weights and mark the layer so that every forward pass
    /// centers them.
    Proxy,
}

impl std::fmt::Display for FoldStyle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FoldStyle::OneShot => "oneshot",
            FoldStyle::Proxy => "proxy",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldOptions {
    pub allow_practical: bool,
    /// Refuse reports whose centering disturbs anything but the folded
    /// normalizations.
    pub strict_safety: bool,
    pub style: FoldStyle,
}

impl Default for FoldOptions {
    fn default() -> Self {
        FoldOptions {
            allow_practical: false,
            strict_safety: true,
            style: FoldStyle::OneShot,
        }
    }
}

#[derive(Debug, Error)]
pub enum ApplyError {
    #[error("report was computed for model {expected}, this model hashes to {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error("report does not match the model: {0}")]
    Mismatch(String),
    #[error("centering would affect layers that are not folded: {}", join(.0))]
    Unsafe(Vec<NodeId>),
    #[error("report plans {0} auxiliary centering insertion(s); pass allow_practical to apply them")]
    PracticalNotAllowed(usize),
    #[error(transparent)]
    Cbwc(#[from] CbwcError),
    #[error("folded model is invalid:\n{0}")]
    Invalid(ValidationReport),
}

fn join(ids: &[NodeId]) -> String {
    ids.iter().map(NodeId::as_str).collect::<Vec<_>>().join(", ")
}

fn check_report(g: &Graph, w: &WeightStore, report: &FoldReport) -> Result<String, ApplyError> {
    let actual = model_hash(g, w);
    if let Some(expected) = &report.model_hash {
        if *expected != actual {
            return Err(ApplyError::HashMismatch {
                expected: expected.clone(),
                actual,
            });
        }
    }
    for id in &report.foldable {
        match g.node(id.as_str()) {
            Some(n) if n.kind.is_centering_norm() => {}
            Some(n) => {
                return Err(ApplyError::Mismatch(format!("{id} is a {}, not a LayerNorm or GroupNorm", n.kind.name())))
            }
            None => return Err(ApplyError::Mismatch(format!("unknown node {id}"))),
        }
    }
    for t in &report.cbwc_targets {
        match g.node(t.node.as_str()) {
            Some(n) if n.class() == NodeClass::GeneralLinear => {}
            Some(n) => {
                return Err(ApplyError::Mismatch(format!(
                    "{} is a {}, not a general linear layer",
                    t.node,
                    n.kind.name()
                )))
            }
            None => return Err(ApplyError::Mismatch(format!("unknown node {}", t.node))),
        }
    }
    for ins in &report.insertions {
        if g.node(ins.after.as_str()).is_none() {
            return Err(ApplyError::Mismatch(format!("unknown node {}", ins.after)));
        }
        if g.node(ins.node.as_str()).is_some() {
            return Err(ApplyError::Mismatch(format!("inserted id {} already exists", ins.node)));
        }
    }
    Ok(actual)
}

/// Apply a fold report and return the rewritten model. An empty report
/// returns the model unchanged.
pub fn apply_fold(
    g: &Graph,
    w: &WeightStore,
    report: &FoldReport,
    opts: FoldOptions,
) -> Result<(Graph, WeightStore), ApplyError> {
    let hash = check_report(g, w, report)?;
    if report.is_noop() {
        return Ok((g.clone(), w.clone()));
    }
    if opts.strict_safety && !report.safety.safe {
        return Err(ApplyError::Unsafe(report.safety.affected.iter().cloned().collect()));
    }
    if !report.insertions.is_empty() && !opts.allow_practical {
        return Err(ApplyError::PracticalNotAllowed(report.insertions.len()));
    }

    let mut out_g = g.clone();
    let mut out_w = w.clone();
    let mut centered = Vec::new();
    match opts.style {
        FoldStyle::OneShot => {
            let updates: Vec<Vec<(String, crate::tensor::Tensor)>> = report
                .cbwc_targets
                .par_iter()
                .map(|t| {
                    let node = g.node(t.node.as_str()).expect("checked above");
                    center_node(node, w, t.groups)
                })
                .collect::<Result<_, _>>()?;
            for (name, t) in updates.into_iter().flatten() {
                out_w.insert(name, t);
            }
            centered = report
                .cbwc_targets
                .iter()
                .map(|t| CenteredRecord {
                    node: t.node.clone(),
                    groups: t.groups,
                })
                .collect();
        }
        FoldStyle::Proxy => {
            for t in &report.cbwc_targets {
                let kind = &g.node(t.node.as_str()).expect("checked above").kind;
                let marked = kind.with_cbwc(t.groups).expect("general linear kinds take cbwc");
                out_g.set_kind(t.node.as_str(), marked);
            }
        }
    }
    for id in &report.foldable {
        let (eps, groups) = match g.node(id.as_str()).map(|n| &n.kind) {
            Some(NodeKind::LayerNorm { eps }) => (*eps, 1),
            Some(NodeKind::GroupNorm { eps, groups, .. }) => (*eps, *groups),
            _ => unreachable!("checked above"),
        };
        out_g.set_kind(id.as_str(), NodeKind::RmsNorm { eps, groups });
    }
    for ins in &report.insertions {
        let node = Node {
            id: ins.node.clone(),
            kind: NodeKind::AuxiliaryCentering { groups: 1 },
            params: Vec::new(),
        };
        out_g.insert_after(ins.after.as_str(), node);
    }
    let practical = report
        .entries
        .iter()
        .any(|e| e.verdict == Verdict::FoldablePractical);
    out_g.set_provenance(Some(Provenance {
        folded_from: hash,
        mode: if practical { "practical" } else { "strict" }.to_string(),
        style: opts.style.to_string(),
        centered,
    }));
    let validation = validate_graph(&out_g, &out_w);
    if !validation.ok() {
        return Err(ApplyError::Invalid(validation));
    }
    Ok((out_g, out_w))
}

/// Plain-text list of the changes `apply_fold` would make, one per line.
pub fn dry_run(g: &Graph, report: &FoldReport) -> String {
    let mut out = String::new();
    for id in &report.foldable {
        let (from, to) = match g.node(id.as_str()).map(|n| &n.kind) {
            Some(NodeKind::GroupNorm { groups, .. }) => ("GroupNorm".to_string(), format!("RMSNorm(groups={groups})")),
            Some(k) => (k.name().to_string(), "RMSNorm".to_string()),
            None => ("?".to_string(), "RMSNorm".to_string()),
        };
        let _ = writeln!(out, "replace {id}: {from} -> {to}");
    }
    for t in &report.cbwc_targets {
        let params = g
            .node(t.node.as_str())
            .map(|n| n.params.join(", "))
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "center {}: {:?} groups={} params [{params}]",
            t.node, t.spec.family, t.groups
        );
    }
    for ins in &report.insertions {
        let edges: Vec<String> = ins
            .consumers
            .iter()
            .map(|(d, s)| format!("{}->{d}[{s}]", ins.after))
            .collect();
        let _ = writeln!(out, "insert {}: AuxiliaryCentering on {}", ins.node, edges.join(", "));
    }
    if out.is_empty() {
        out.push_str("no changes\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{analyze, Mode};
    use crate::tensor::Tensor;

    fn linear_ln() -> (Graph, WeightStore) {
        let mut b = Graph::builder();
        let x = b.input("x", &[3]);
        let l = b.node("fc", NodeKind::linear(), &["w", "b"], &[&x]);
        let n = b.node("ln", NodeKind::layer_norm(), &["g", "beta"], &[&l]);
        b.output("y", &n);
        let w: WeightStore = [
            ("w", Tensor::new(vec![3, 3], vec![1., 2., 3., 4., 5., 6., 7., 8., 10.]).unwrap()),
            ("b", Tensor::new(vec![3], vec![0.5, -1., 2.]).unwrap()),
            ("g", Tensor::new(vec![3], vec![1., 2., 3.]).unwrap()),
            ("beta", Tensor::new(vec![3], vec![0., 0.1, 0.2]).unwrap()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        (b.build().unwrap(), w)
    }

    #[test]
    fn folds_linear_ln() {
        let (g, w) = linear_ln();
        let rep = analyze(&g, &w, Mode::Strict).unwrap();
        let (fg, fw) = apply_fold(&g, &w, &rep, FoldOptions::default()).unwrap();
        assert!(matches!(fg.node("ln").unwrap().kind, NodeKind::RmsNorm { groups: 1, .. }));
        assert_eq!(fw.get("g"), w.get("g"));
        let b = fw.get("b").unwrap();
        assert!(crate::tensor::mean(b.data()).abs() < 1e-15);
        assert_eq!(fg.provenance().unwrap().folded_from, model_hash(&g, &w));
    }

    #[test]
    fn empty_report_is_identity() {
        let mut b = Graph::builder();
        let x = b.input("x", &[3]);
        let r = b.node("act", NodeKind::Relu {}, &[], &[&x]);
        b.output("y", &r);
        let g = b.build().unwrap();
        let w = WeightStore::new();
        let rep = analyze(&g, &w, Mode::Strict).unwrap();
        let (fg, _) = apply_fold(&g, &w, &rep, FoldOptions::default()).unwrap();
        assert_eq!(model_hash(&fg, &w), model_hash(&g, &w));
        assert_eq!(dry_run(&g, &rep), "no changes\n");
    }

    #[test]
    fn hash_mismatch_is_rejected() {
        let (g, w) = linear_ln();
        let rep = analyze(&g, &w, Mode::Strict).unwrap();
        let mut w2 = w.clone();
        w2.insert("b".to_string(), Tensor::new(vec![3], vec![0., 0., 0.]).unwrap());
        assert!(matches!(
            apply_fold(&g, &w2, &rep, FoldOptions::default()),
            Err(ApplyError::HashMismatch { .. })
        ));
    }

    #[test]
    fn proxy_style_keeps_weights() {
        let (g, w) = linear_ln();
        let rep = analyze(&g, &w, Mode::Strict).unwrap();
        let opts = FoldOptions {
            style: FoldStyle::Proxy,
            ..FoldOptions::default()
        };
        let (fg, fw) = apply_fold(&g, &w, &rep, opts).unwrap();
        assert_eq!(fw.get("w"), w.get("w"));
        assert_eq!(fg.node("fc").unwrap().kind.cbwc(), Some(1));
        assert!(fg.provenance().unwrap().centered.is_empty());
    }

    #[test]
    fn dry_run_lists_changes() {
        let (g, w) = linear_ln();
        let rep = analyze(&g, &w, Mode::Strict).unwrap();
        let d = dry_run(&g, &rep);
        assert!(d.contains("replace ln: LayerNorm -> RMSNorm"));
        assert!(d.contains("center fc: LinearColumns groups=1 params [w, b]"));
    }
}
