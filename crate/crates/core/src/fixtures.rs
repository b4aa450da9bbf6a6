//! Small seeded models used by tests, the acceptance run and the
//! `fixture` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, GraphBuilder, NodeId, NodeKind, WeightStore};
use crate::tensor::Tensor;

pub const FIXTURES: &[&str] = &[
    "linear_ln",
    "mlp",
    "post_ln",
    "pre_ln_gpt",
    "concat",
    "fan_out_trap",
    "conv_gn",
    "rnn_ln",
    "attention_ln",
    "residual_scale",
];

pub fn fixture(name: &str, seed: u64) -> Option<(Graph, WeightStore)> {
    Some(match name {
        "linear_ln" => linear_ln(seed),
        "mlp" => mlp(seed),
        "post_ln" => post_ln_block(seed),
        "pre_ln_gpt" => pre_ln_gpt(seed),
        "concat" => concat_ln(seed),
        "fan_out_trap" => fan_out_trap(seed),
        "conv_gn" => conv_gn(seed),
        "rnn_ln" => rnn_ln(seed),
        "attention_ln" => attention_ln(seed),
        "residual_scale" => residual_scale(seed),
        _ => return None,
    })
}

struct Builder {
    b: GraphBuilder,
    w: WeightStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Builder {
            b: Graph::builder(),
            w: WeightStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn param(&mut self, name: &str, shape: &[usize], lo: f64, hi: f64) -> String {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(lo..hi)).collect();
        self.w.insert(name, Tensor::new(shape.to_vec(), data).expect("shape matches"));
        name.to_string()
    }

    /// Weights scaled by fan-in, biases with an obvious nonzero mean.
    fn linear(&mut self, id: &str, out: usize, inp: usize, x: &NodeId) -> NodeId {
        let s = 1.0 / (inp as f64).sqrt();
        let w = self.param(&format!("{id}.w"), &[out, inp], -s, s);
        let b = self.param(&format!("{id}.b"), &[out], 0.2, 0.8);
        self.b.node(id, NodeKind::linear(), &[&w, &b], &[x])
    }

    fn norm(&mut self, id: &str, kind: NodeKind, n: usize, x: &NodeId) -> NodeId {
        let g = self.param(&format!("{id}.gamma"), &[n], 0.5, 1.5);
        let b = self.param(&format!("{id}.beta"), &[n], -0.5, 0.5);
        self.b.node(id, kind, &[&g, &b], &[x])
    }

    fn ln(&mut self, id: &str, n: usize, x: &NodeId) -> NodeId {
        self.norm(id, NodeKind::layer_norm(), n, x)
    }

    fn finish(self) -> (Graph, WeightStore) {
        (self.b.build().expect("fixture graphs are well formed"), self.w)
    }
}

/// `x[6] -> Linear(5) -> LayerNorm`.
pub fn linear_ln(seed: u64) -> (Graph, WeightStore) {
    let mut f = Builder::new(seed);
    let x = f.b.input("x", &[6]);
    let l = f.linear("fc", 5, 6, &x);
    let n = f.ln("ln", 5, &l);
    f.b.output("y", &n);
    f.finish()
}

/// Two-layer classifier over a batch of 8: `Linear -> LayerNorm -> ReLU ->
/// Linear`.
pub fn mlp(seed: u64) -> (Graph, WeightStore) {
    let mut f = Builder::new(seed);
    let x = f.b.input("x", &[8, 6]);
    let h = f.linear("fc1", 16, 6, &x);
    let n = f.ln("ln", 16, &h);
    let r = f.b.node("act", NodeKind::Relu {}, &[], &[&n]);
    let o = f.linear("fc2", 3, 16, &r);
    f.b.output("logits", &o);
    f.finish()
}

const T: usize = 4;
const D: usize = 8;
const HIDDEN: usize = 16;

/// Attention probabilities for a `[T, D]` sequence.
fn scores(f: &mut Builder, id: &str, x: &NodeId) -> NodeId {
    let s = f.linear(id, T, D, x);
    f.b.node(&format!("{id}_softmax"), NodeKind::Softmax {}, &[], &[&s])
}

fn attention_value(f: &mut Builder, id: &str, probs: &NodeId, x: &NodeId) -> NodeId {
    let s = 1.0 / (D as f64).sqrt();
    let v = f.param(&format!("{id}.v"), &[D, D], -s, s);
    let b = f.param(&format!("{id}.b"), &[D], 0.2, 0.8);
    f.b.node(
        id,
        NodeKind::AttentionValueProjection { cbwc: None },
        &[&v, &b],
        &[probs, x],
    )
}

fn ffn(f: &mut Builder, prefix: &str, x: &NodeId) -> NodeId {
    let h = f.linear(&format!("{prefix}_ffn1"), HIDDEN, D, x);
    let r = f.b.node(&format!("{prefix}_relu"), NodeKind::Relu {}, &[], &[&h]);
    f.linear(&format!("{prefix}_ffn2"), D, HIDDEN, &r)
}

/// Post-LN block whose residual branches both pass through general linear
/// layers: `LN1(skip1(x) + attn(x))`, then `LN2(skip2(h) + ffn(h))`.
pub fn post_ln_block(seed: u64) -> (Graph, WeightStore) {
    let mut f = Builder::new(seed);
    let x = f.b.input("x", &[T, D]);
    let p = scores(&mut f, "scores", &x);
    let a = attention_value(&mut f, "attn_v", &p, &x);
    let s1 = f.linear("skip1", D, D, &x);
    let r1 = f.b.node("res1", NodeKind::ResidualAdd { arity: 2 }, &[], &[&s1, &a]);
    let h = f.ln("ln1", D, &r1);
    let m = ffn(&mut f, "block", &h);
    let s2 = f.linear("skip2", D, D, &h);
    let r2 = f.b.node("res2", NodeKind::ResidualAdd { arity: 2 }, &[], &[&s2, &m]);
    let y = f.ln("ln2", D, &r2);
    f.b.output("y", &y);
    f.finish()
}

/// Two pre-LN blocks over token embeddings, a final LayerNorm and an output
/// head: five LayerNorms, all reading the embedding through residuals.
pub fn pre_ln_gpt(seed: u64) -> (Graph, WeightStore) {
    const VOCAB: usize = 16;
    let mut f = Builder::new(seed);
    let tok = f.b.token_input("tokens", &[T], VOCAB);
    let table = f.param("emb.table", &[VOCAB, D], -1.0, 1.0);
    let mut h = f.b.node("emb", NodeKind::Embedding {}, &[&table], &[&tok]);
    for i in 0..2 {
        let p = format!("b{i}");
        let n1 = f.ln(&format!("{p}_ln1"), D, &h);
        let probs = scores(&mut f, &format!("{p}_scores"), &n1);
        let a = attention_value(&mut f, &format!("{p}_attn_v"), &probs, &n1);
        let r1 = f.b.node(&format!("{p}_res1"), NodeKind::ResidualAdd { arity: 2 }, &[], &[&h, &a]);
        let n2 = f.ln(&format!("{p}_ln2"), D, &r1);
        let m = ffn(&mut f, &p, &n2);
        h = f.b.node(&format!("{p}_res2"), NodeKind::ResidualAdd { arity: 2 }, &[], &[&r1, &m]);
    }
    let n = f.ln("ln_f", D, &h);
    let head = f.linear("lm_head", VOCAB, D, &n);
    f.b.output("logits", &head);
    f.finish()
}

/// Two centered layers joined by a concatenation before a LayerNorm.
pub fn concat_ln(seed: u64) -> (Graph, WeightStore) {
    let mut f = Builder::new(seed);
    let x = f.b.input("x", &[6]);
    let a = f.linear("fc_a", 4, 6, &x);
    let c = f.linear("fc_b", 4, 6, &x);
    let cat = f.b.node("cat", NodeKind::Concat { arity: 2 }, &[], &[&a, &c]);
    let n = f.ln("ln", 8, &cat);
    f.b.output("y", &n);
    f.finish()
}

/// A layer feeding both a LayerNorm and a ReLU branch.
pub fn fan_out_trap(seed: u64) -> (Graph, WeightStore) {
    let mut f = Builder::new(seed);
    let x = f.b.input("x", &[6]);
    let l = f.linear("fc", 5, 6, &x);
    let n = f.ln("ln", 5, &l);
    let r = f.b.node("act", NodeKind::Relu {}, &[], &[&l]);
    f.b.output("y_norm", &n);
    f.b.output("y_act", &r);
    f.finish()
}

/// `[6, 6, 3]` image -> 3x3 convolution to 8 channels -> GroupNorm(2).
pub fn conv_gn(seed: u64) -> (Graph, WeightStore) {
    let mut f = Builder::new(seed);
    let x = f.b.input("img", &[6, 6, 3]);
    let s = 1.0 / 27f64.sqrt();
    let k = f.param("conv.k", &[8, 3, 3, 3], -s, s);
    let b = f.param("conv.b", &[8], 0.2, 0.8);
    let c = f.b.node(
        "conv",
        NodeKind::Conv2d {
            stride: 1,
            padding: 1,
            cbwc: None,
        },
        &[&k, &b],
        &[&x],
    );
    let n = f.norm(
        "gn",
        NodeKind::GroupNorm {
            groups: 2,
            eps: crate::graph::DEFAULT_EPS,
            axis: -1,
        },
        8,
        &c,
    );
    f.b.output("y", &n);
    f.finish()
}

/// One recurrent step `Wv x + Wh h + b` over a batch of 2, then LayerNorm.
pub fn rnn_ln(seed: u64) -> (Graph, WeightStore) {
    let mut f = Builder::new(seed);
    let x = f.b.input("x", &[2, 4]);
    let h0 = f.b.input("h0", &[2, 5]);
    let wv = f.param("cell.wv", &[5, 4], -0.5, 0.5);
    let wh = f.param("cell.wh", &[5, 5], -0.5, 0.5);
    let b = f.param("cell.b", &[5], 0.2, 0.8);
    let c = f.b.node(
        "cell",
        NodeKind::RecurrentCell { cbwc: None },
        &[&wv, &wh, &b],
        &[&x, &h0],
    );
    let n = f.ln("ln", 5, &c);
    f.b.output("h", &n);
    f.finish()
}

/// Self-attention value projection followed by LayerNorm.
pub fn attention_ln(seed: u64) -> (Graph, WeightStore) {
    let mut f = Builder::new(seed);
    let x = f.b.input("x", &[T, D]);
    let p = scores(&mut f, "scores", &x);
    let a = attention_value(&mut f, "attn_v", &p, &x);
    let n = f.ln("ln", D, &a);
    f.b.output("y", &n);
    f.finish()
}

/// `LN(fc_a(x) + dropout(0.5 * fc_b(x)))` with inference-mode dropout.
pub fn residual_scale(seed: u64) -> (Graph, WeightStore) {
    let mut f = Builder::new(seed);
    let x = f.b.input("x", &[6]);
    let a = f.linear("fc_a", 5, 6, &x);
    let c = f.linear("fc_b", 5, 6, &x);
    let s = f.b.node("half", NodeKind::ScalarScale { scale: 0.5 }, &[], &[&c]);
    let d = f.b.node(
        "drop",
        NodeKind::DropoutInference {
            p: 0.1,
            inverted: true,
            training: false,
        },
        &[],
        &[&s],
    );
    let r = f.b.node("res", NodeKind::ResidualAdd { arity: 2 }, &[], &[&a, &d]);
    let n = f.ln("ln", 5, &r);
    f.b.output("y", &n);
    f.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::validate_graph;

    #[test]
    fn all_fixtures_validate() {
        for name in FIXTURES {
            let (g, w) = fixture(name, 0).unwrap();
            let r = validate_graph(&g, &w);
            assert!(r.ok(), "{name}: {r}");
        }
        assert!(fixture("nope", 0).is_none());
    }

    #[test]
    fn seed_changes_weights_only() {
        let (g0, w0) = mlp(0);
        let (g1, w1) = mlp(1);
        assert_eq!(g0, g1);
        assert_ne!(w0.get("fc1.w"), w1.get("fc1.w"));
    }
}
