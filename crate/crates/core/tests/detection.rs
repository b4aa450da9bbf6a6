use std::collections::BTreeSet;

use lnfold_core::detect::{
    build_zero_mean_graph, compute_affected_layers, detect_foldable, propagate_states, Mode, Verdict,
};
use lnfold_core::fixtures::{self, fixture, FIXTURES};
use lnfold_core::graph::{parse_model, serialize_model, Graph, NodeClass, NodeId, NodeKind};

fn ids(v: &[&str]) -> BTreeSet<NodeId> {
    v.iter().map(|s| NodeId::new(*s)).collect()
}

/// Same model with nodes and edges listed in reverse, which changes the
/// topological order the analysis walks.
fn reversed(g: &Graph) -> Graph {
    let (text, blob) = serialize_model(g, &Default::default());
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    doc["nodes"].as_array_mut().unwrap().reverse();
    doc["edges"].as_array_mut().unwrap().reverse();
    parse_model(&doc.to_string(), &blob).unwrap().0
}

#[test]
fn post_ln_block_is_strictly_foldable() {
    let (g, _) = fixtures::post_ln_block(0);
    let rep = detect_foldable(&g, Mode::Strict).unwrap();
    assert_eq!(rep.foldable, ids(&["ln1", "ln2"]));
    let targets: BTreeSet<NodeId> = rep.cbwc_targets.iter().map(|t| t.node.clone()).collect();
    assert_eq!(targets, ids(&["attn_v", "block_ffn2", "skip1", "skip2"]));
    assert!(rep.safety.safe);
    assert!(rep.insertions.is_empty());
}

#[test]
fn pre_ln_model_needs_one_auxiliary_centering() {
    let (g, _) = fixtures::pre_ln_gpt(0);
    let strict = detect_foldable(&g, Mode::Strict).unwrap();
    assert_eq!(strict.entries.len(), 5);
    assert!(strict.foldable.is_empty());
    for e in &strict.entries {
        assert_eq!(e.zero_mean_graph.other_leaves, ids(&["emb"]), "{}", e.ln);
    }

    let practical = detect_foldable(&g, Mode::Practical).unwrap();
    assert_eq!(practical.foldable.len(), 5);
    assert!(practical.entries.iter().all(|e| e.verdict == Verdict::FoldablePractical));
    assert_eq!(practical.insertions.len(), 1);
    let ins = &practical.insertions[0];
    assert_eq!(ins.after.as_str(), "emb");
    assert_eq!(ins.node.as_str(), "emb__aux_center");
    assert_eq!(ins.rescues.len(), 5);
    let consumers: Vec<(&str, usize)> = ins.consumers.iter().map(|(d, s)| (d.as_str(), *s)).collect();
    assert_eq!(consumers, [("b0_ln1", 0), ("b0_res1", 0)]);
    assert!(practical.safety.safe);
    assert!(practical.entries.iter().all(|e| !e.aux_centering_insertions.is_empty()));
}

#[test]
fn concat_is_never_foldable() {
    let (g, _) = fixtures::concat_ln(0);
    for mode in [Mode::Strict, Mode::Practical] {
        let rep = detect_foldable(&g, mode).unwrap();
        assert!(rep.foldable.is_empty());
        assert_eq!(rep.entries[0].verdict, Verdict::NotFoldable);
    }
}

#[test]
fn fan_out_trap_is_unsafe() {
    let (g, _) = fixtures::fan_out_trap(0);
    let rep = detect_foldable(&g, Mode::Strict).unwrap();
    assert_eq!(rep.foldable, ids(&["ln"]));
    assert!(!rep.safety.safe);
    assert_eq!(rep.safety.affected, ids(&["act"]));
    let z = build_zero_mean_graph(&g, "ln").unwrap();
    assert_eq!(compute_affected_layers(&g, &z).affected, ids(&["act"]));
}

#[test]
fn softmax_leaf_alone_is_not_worth_an_insertion() {
    let mut b = Graph::builder();
    let x = b.input("x", &[4]);
    let s = b.node("sm", NodeKind::Softmax {}, &[], &[&x]);
    let n = b.node("ln", NodeKind::layer_norm(), &[], &[&s]);
    b.output("y", &n);
    let rep = detect_foldable(&b.build().unwrap(), Mode::Practical).unwrap();
    assert!(rep.insertions.is_empty());
    assert!(rep.foldable.is_empty());
}

#[test]
fn results_do_not_depend_on_node_order() {
    let mut reordered = 0;
    for name in FIXTURES {
        let (g, _) = fixture(name, 0).unwrap();
        let r = reversed(&g);
        if g.topo_order().unwrap() != r.topo_order().unwrap() {
            reordered += 1;
        }
        for mode in [Mode::Strict, Mode::Practical] {
            let a = detect_foldable(&g, mode).unwrap();
            let b = detect_foldable(&r, mode).unwrap();
            assert_eq!(a, b, "{name} {mode}");
        }
    }
    assert!(reordered >= 5);
}

#[test]
fn practical_is_superset_of_strict() {
    for name in FIXTURES {
        let (g, _) = fixture(name, 0).unwrap();
        let s = detect_foldable(&g, Mode::Strict).unwrap();
        let p = detect_foldable(&g, Mode::Practical).unwrap();
        assert!(s.foldable.is_subset(&p.foldable), "{name}");
        for e in &p.entries {
            if e.verdict == Verdict::FoldablePractical {
                assert!(!e.aux_centering_insertions.is_empty(), "{name} {}", e.ln);
            }
        }
    }
}

#[test]
fn residual_state_matches_and_of_inputs() {
    for name in FIXTURES {
        let (g, _) = fixture(name, 0).unwrap();
        let st = propagate_states(&g).unwrap();
        for n in g.nodes() {
            if n.class() == NodeClass::Residual {
                let all = g.predecessors(n.id.as_str()).iter().all(|p| st[*p].centered);
                assert_eq!(st[&n.id].centered, all, "{name} {}", n.id);
            }
            let s = &st[&n.id];
            if s.centered {
                assert!(!s.corresponding.is_empty() || n.class() == NodeClass::Centering);
            }
        }
    }
}

#[test]
fn strict_set_matches_incoming_states() {
    for name in FIXTURES {
        let (g, _) = fixture(name, 0).unwrap();
        let st = propagate_states(&g).unwrap();
        let rep = detect_foldable(&g, Mode::Strict).unwrap();
        let mut s = BTreeSet::new();
        let mut c = BTreeSet::new();
        for n in g.nodes().filter(|n| n.kind.is_centering_norm()) {
            let incoming = &st[g.predecessors(n.id.as_str())[0]];
            if incoming.centered {
                s.insert(n.id.clone());
                c.extend(incoming.corresponding.iter().cloned());
            }
        }
        assert_eq!(rep.foldable, s, "{name}");
        let targets: BTreeSet<NodeId> = rep.cbwc_targets.iter().map(|t| t.node.clone()).collect();
        assert_eq!(targets, c, "{name}");
    }
}

#[test]
fn report_round_trips_through_json() {
    let (g, _) = fixtures::pre_ln_gpt(0);
    let rep = detect_foldable(&g, Mode::Practical).unwrap();
    let text = serde_json::to_string(&rep).unwrap();
    let back: lnfold_core::detect::FoldReport = serde_json::from_str(&text).unwrap();
    assert_eq!(rep, back);
}
