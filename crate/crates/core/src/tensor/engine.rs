//! Graph evaluation with a recorded tape and reverse-mode gradients.

use indexmap::IndexMap;
use thiserror::Error;

use super::ops::{self, Conv2dGeometry, NormCache, NormConfig};
use super::{Tensor, TensorError};
use crate::graph::{Graph, GraphError, NodeId, NodeKind, WeightStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    /// Reject non-finite inputs and zero-variance slices at `eps = 0`
    /// instead of propagating NaN or zeroing the slice.
    pub strict: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { strict: true }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("node {node}: {source}")]
    Op { node: NodeId, source: TensorError },
    #[error("node {node}: non-finite input value")]
    NonFiniteInput { node: NodeId },
    #[error("expected {expected} input tensors, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("input {node}: expected shape {expected:?}, got {got:?}")]
    InputShape {
        node: NodeId,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("node {node}: parameter {name} not found")]
    MissingParam { node: NodeId, name: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("expected {expected} output gradients, got {got}")]
    GradCount { expected: usize, got: usize },
    #[error("output gradient {index}: expected shape {expected:?}, got {got:?}")]
    GradShape {
        index: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
enum OpCache {
    None,
    Norm(NormCache),
    /// Mixed values `P X` of an attention value projection.
    Mixed(Tensor),
}

/// One executed node.
#[derive(Debug, Clone)]
pub struct TapeEntry {
    pub node: NodeId,
    pub kind: NodeKind,
    /// Tape indices of the producers, by input slot.
    pub inputs: Vec<usize>,
    pub params: Vec<String>,
    /// Parameter values the op actually used (the centered projection for
    /// proxy-centered layers).
    pub param_values: Vec<Tensor>,
    pub output: Tensor,
    cache: OpCache,
}

impl TapeEntry {
    /// Smallest normalization denominator, if this entry normalizes.
    pub fn min_norm_scale(&self) -> Option<f64> {
        match &self.cache {
            OpCache::Norm(c) => Some(c.min_scale()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Tape {
    entries: Vec<TapeEntry>,
    outputs: Vec<usize>,
    inputs: Vec<usize>,
    strict: bool,
}

impl Tape {
    pub fn entries(&self) -> &[TapeEntry] {
        &self.entries
    }

    pub fn entry(&self, node: &str) -> Option<&TapeEntry> {
        self.entries.iter().find(|e| e.node.as_str() == node)
    }

    pub fn outputs(&self) -> Vec<&Tensor> {
        self.outputs.iter().map(|&i| &self.entries[i].output).collect()
    }

    /// Recompute every op from the recorded inputs and parameter values.
    pub fn replay(&self) -> Result<Vec<Tensor>, EvalError> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let out = if let NodeKind::Input { .. } = e.kind {
                e.output.clone()
            } else {
                let ins: Vec<&Tensor> = e.inputs.iter().map(|&i| &values[i]).collect();
                eval_op(&e.kind, &ins, &e.param_values, self.strict)
                    .map_err(|source| EvalError::Op {
                        node: e.node.clone(),
                        source,
                    })?
                    .0
            };
            values.push(out);
        }
        Ok(self.outputs.iter().map(|&i| values[i].clone()).collect())
    }
}

/// Scalar objective over the graph outputs.
#[derive(Debug, Clone, PartialEq)]
pub enum Loss {
    SumOfOutputs,
    SumOfSquares,
    /// `sum_i <weights_i, output_i>`.
    Weighted(Vec<Tensor>),
}

impl Loss {
    pub fn value(&self, outputs: &[Tensor]) -> f64 {
        match self {
            Loss::SumOfOutputs => outputs.iter().flat_map(|t| t.data()).sum(),
            Loss::SumOfSquares => outputs.iter().flat_map(|t| t.data()).map(|v| v * v).sum(),
            Loss::Weighted(ws) => outputs
                .iter()
                .zip(ws)
                .flat_map(|(o, w)| o.data().iter().zip(w.data()))
                .map(|(a, b)| a * b)
                .sum(),
        }
    }

    pub fn output_grads(&self, outputs: &[Tensor]) -> Vec<Tensor> {
        match self {
            Loss::SumOfOutputs => outputs.iter().map(|o| Tensor::full(o.shape(), 1.0)).collect(),
            Loss::SumOfSquares => outputs.iter().map(|o| o.map(|v| 2.0 * v)).collect(),
            Loss::Weighted(ws) => ws.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Gradient for every parameter referenced by the graph; for
    /// proxy-centered layers this is the projected gradient of the stored
    /// proxy weight.
    pub params: IndexMap<String, Tensor>,
    /// Gradients for the graph inputs, in input order (zero for token ids).
    pub inputs: Vec<Tensor>,
}

/// Axis a proxy-centered parameter is centered along.
pub(crate) fn proxy_axis(kind: &NodeKind, param: &Tensor) -> usize {
    match kind {
        NodeKind::AttentionValueProjection { .. } if param.rank() == 2 => 1,
        _ => 0,
    }
}

fn effective_params(node_kind: &NodeKind, raw: Vec<Tensor>) -> Result<Vec<Tensor>, TensorError> {
    match node_kind.cbwc() {
        None => Ok(raw),
        Some(groups) => raw
            .iter()
            .map(|p| ops::center_along(p, proxy_axis(node_kind, p), groups))
            .collect(),
    }
}

fn eval_op(
    kind: &NodeKind,
    ins: &[&Tensor],
    params: &[Tensor],
    strict: bool,
) -> Result<(Tensor, OpCache), TensorError> {
    let plain = |t: Tensor| Ok((t, OpCache::None));
    let norm = |op, groups, eps, center| {
        let cfg = NormConfig { groups, eps, center };
        ops::normalize(op, ins[0], cfg, params.first(), params.get(1), strict)
            .map(|(y, c)| (y, OpCache::Norm(c)))
    };
    match kind {
        NodeKind::Input { .. } | NodeKind::Output {} => plain(ins[0].clone()),
        NodeKind::Linear { .. } => plain(ops::linear_forward(&params[0], params.get(1), ins[0])?),
        NodeKind::Conv2d { stride, padding, .. } => {
            let geom = Conv2dGeometry {
                stride: *stride,
                padding: *padding,
            };
            plain(ops::conv2d_forward(&params[0], params.get(1), ins[0], geom)?)
        }
        NodeKind::RecurrentCell { .. } => plain(ops::rnn_cell_forward(
            &params[0],
            &params[1],
            params.get(2),
            ins[0],
            ins[1],
        )?),
        NodeKind::AttentionValueProjection { .. } => {
            let (y, mixed) = ops::attention_value_forward(ins[0], ins[1], &params[0], params.get(1))?;
            Ok((y, OpCache::Mixed(mixed)))
        }
        NodeKind::LayerNorm { eps } => norm("layer_norm", 1, *eps, true),
        NodeKind::RmsNorm { eps, groups } => norm("rms_norm", *groups, *eps, false),
        NodeKind::GroupNorm { groups, eps, .. } => norm("group_norm", *groups, *eps, true),
        NodeKind::ScalarScale { .. } | NodeKind::DropoutInference { .. } => plain(ops::scalar_scale(
            ins[0],
            kind.scale_factor().expect("scale kinds have a factor"),
        )),
        NodeKind::ResidualAdd { .. } => plain(ops::residual_add(ins)?),
        NodeKind::Concat { .. } => plain(ops::concat(ins)?),
        NodeKind::Relu {} => plain(ops::relu(ins[0])),
        NodeKind::Softmax {} => plain(ops::softmax(ins[0])),
        NodeKind::Embedding {} => plain(ops::embedding_lookup(ins[0], &params[0])?),
        NodeKind::AuxiliaryCentering { groups } => plain(ops::auxiliary_centering(ins[0], *groups)?),
    }
}

/// Evaluate `g` in topological order, recording a tape.
pub fn forward(
    g: &Graph,
    w: &WeightStore,
    inputs: &[Tensor],
    opts: EvalOptions,
) -> Result<(Vec<Tensor>, Tape), EvalError> {
    if inputs.len() != g.inputs().len() {
        return Err(EvalError::InputCount {
            expected: g.inputs().len(),
            got: inputs.len(),
        });
    }
    let order = g.topo_order()?;
    let mut slot_of: IndexMap<&NodeId, usize> = IndexMap::with_capacity(order.len());
    let mut entries: Vec<TapeEntry> = Vec::with_capacity(order.len());
    let mut tape_inputs = Vec::with_capacity(inputs.len());
    for id in &order {
        let node = g.node(id.as_str()).expect("topo order lists graph nodes");
        let input_idx: Vec<usize> = g
            .predecessors(id.as_str())
            .into_iter()
            .map(|p| slot_of[p])
            .collect();
        let (output, param_values, cache) = if let NodeKind::Input { shape, .. } = &node.kind {
            let pos = g
                .inputs()
                .iter()
                .position(|i| i == id)
                .expect("validated inputs list every Input node");
            let x = &inputs[pos];
            if x.shape() != shape.as_slice() {
                return Err(EvalError::InputShape {
                    node: id.clone(),
                    expected: shape.clone(),
                    got: x.shape().to_vec(),
                });
            }
            if opts.strict && !x.is_finite() {
                return Err(EvalError::NonFiniteInput { node: id.clone() });
            }
            tape_inputs.push(entries.len());
            (x.clone(), Vec::new(), OpCache::None)
        } else {
            let raw = node
                .params
                .iter()
                .map(|name| {
                    w.get(name).cloned().ok_or_else(|| EvalError::MissingParam {
                        node: id.clone(),
                        name: name.clone(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let op_err = |source| EvalError::Op {
                node: id.clone(),
                source,
            };
            let params = effective_params(&node.kind, raw).map_err(op_err)?;
            let ins: Vec<&Tensor> = input_idx.iter().map(|&i| &entries[i].output).collect();
            let (y, cache) = eval_op(&node.kind, &ins, &params, opts.strict).map_err(op_err)?;
            (y, params, cache)
        };
        slot_of.insert(id, entries.len());
        entries.push(TapeEntry {
            node: id.clone(),
            kind: node.kind.clone(),
            inputs: input_idx,
            params: node.params.clone(),
            param_values,
            output,
            cache,
        });
    }
    // graph inputs may be listed in a different order than they execute
    tape_inputs.sort_by_key(|&i| {
        g.inputs()
            .iter()
            .position(|n| *n == entries[i].node)
            .expect("input entry")
    });
    let outputs: Vec<usize> = g.outputs().iter().map(|o| slot_of[o]).collect();
    let tape = Tape {
        entries,
        outputs,
        inputs: tape_inputs,
        strict: opts.strict,
    };
    let values = tape.outputs().into_iter().cloned().collect();
    Ok((values, tape))
}

/// Reverse-mode pass over `tape` seeded with one gradient per graph output.
pub fn backward(tape: &Tape, out_grads: &[Tensor]) -> Result<Gradients, EvalError> {
    if out_grads.len() != tape.outputs.len() {
        return Err(EvalError::GradCount {
            expected: tape.outputs.len(),
            got: out_grads.len(),
        });
    }
    let mut grads: Vec<Option<Tensor>> = vec![None; tape.entries.len()];
    for (index, (&i, g)) in tape.outputs.iter().zip(out_grads).enumerate() {
        let expected = tape.entries[i].output.shape();
        if g.shape() != expected {
            return Err(EvalError::GradShape {
                index,
                expected: expected.to_vec(),
                got: g.shape().to_vec(),
            });
        }
        accumulate(&mut grads[i], g.clone());
    }
    let mut params: IndexMap<String, Tensor> = IndexMap::new();
    for e in &tape.entries {
        for (name, v) in e.params.iter().zip(&e.param_values) {
            params.entry(name.clone()).or_insert_with(|| Tensor::zeros(v.shape()));
        }
    }
    for (idx, e) in tape.entries.iter().enumerate().rev() {
        let Some(dy) = grads[idx].take() else {
            continue;
        };
        let ins: Vec<&Tensor> = e.inputs.iter().map(|&i| &tape.entries[i].output).collect();
        let (din, dparams) = op_backward(e, &ins, &dy);
        for (&src, d) in e.inputs.iter().zip(din) {
            accumulate(&mut grads[src], d);
        }
        for (k, d) in dparams.into_iter().enumerate() {
            let d = match e.kind.cbwc() {
                Some(groups) => ops::center_along(&d, proxy_axis(&e.kind, &d), groups)
                    .expect("shape checked in forward"),
                None => d,
            };
            params
                .get_mut(&e.params[k])
                .expect("registered above")
                .add_assign(&d);
        }
        if matches!(e.kind, NodeKind::Input { .. }) {
            grads[idx] = Some(dy);
        }
    }
    let inputs = tape
        .inputs
        .iter()
        .map(|&i| {
            let e = &tape.entries[i];
            match (&e.kind, grads[i].take()) {
                (NodeKind::Input { vocab: Some(_), .. }, _) | (_, None) => Tensor::zeros(e.output.shape()),
                (_, Some(g)) => g,
            }
        })
        .collect();
    Ok(Gradients { params, inputs })
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Input and parameter gradients of one op, by slot and parameter index.
fn op_backward(e: &TapeEntry, ins: &[&Tensor], dy: &Tensor) -> (Vec<Tensor>, Vec<Tensor>) {
    let p = &e.param_values;
    let with_bias = |mut v: Vec<Tensor>, db: Tensor, n_weights: usize| {
        if p.len() > n_weights {
            v.push(db);
        }
        v
    };
    match &e.kind {
        NodeKind::Input { .. } => (vec![], vec![]),
        NodeKind::Output {} => (vec![dy.clone()], vec![]),
        NodeKind::Linear { .. } => {
            let (dx, dw, db) = ops::linear_backward(&p[0], ins[0], dy);
            (vec![dx], with_bias(vec![dw], db, 1))
        }
        NodeKind::Conv2d { stride, padding, .. } => {
            let geom = Conv2dGeometry {
                stride: *stride,
                padding: *padding,
            };
            let (dx, dk, db) = ops::conv2d_backward(&p[0], ins[0], dy, geom);
            (vec![dx], with_bias(vec![dk], db, 1))
        }
        NodeKind::RecurrentCell { .. } => {
            let (dx, dwv, db) = ops::linear_backward(&p[0], ins[0], dy);
            let (dh, dwh, _) = ops::linear_backward(&p[1], ins[1], dy);
            (vec![dx, dh], with_bias(vec![dwv, dwh], db, 2))
        }
        NodeKind::AttentionValueProjection { .. } => {
            let OpCache::Mixed(mixed) = &e.cache else {
                unreachable!("attention entries cache the mixed values")
            };
            let (dp, dx, dv, db) = ops::attention_value_backward(ins[0], ins[1], &p[0], mixed, dy);
            (vec![dp, dx], with_bias(vec![dv], db, 1))
        }
        NodeKind::LayerNorm { .. } | NodeKind::RmsNorm { .. } | NodeKind::GroupNorm { .. } => {
            let OpCache::Norm(cache) = &e.cache else {
                unreachable!("norm entries cache their statistics")
            };
            let (dx, dgamma, dbeta) = ops::normalize_backward(cache, p.first(), p.len() > 1, dy);
            (vec![dx], dgamma.into_iter().chain(dbeta).collect())
        }
        NodeKind::ScalarScale { .. } | NodeKind::DropoutInference { .. } => {
            let s = e.kind.scale_factor().expect("scale kinds have a factor");
            (vec![ops::scalar_scale(dy, s)], vec![])
        }
        NodeKind::ResidualAdd { .. } => (ins.iter().map(|_| dy.clone()).collect(), vec![]),
        NodeKind::Concat { .. } => {
            let widths: Vec<usize> = ins.iter().map(|t| t.last_dim()).collect();
            (ops::concat_backward(&widths, dy), vec![])
        }
        NodeKind::Relu {} => (vec![ops::relu_backward(ins[0], dy)], vec![]),
        NodeKind::Softmax {} => (vec![ops::softmax_backward(&e.output, dy)], vec![]),
        NodeKind::Embedding {} => (
            vec![Tensor::zeros(ins[0].shape())],
            vec![ops::embedding_backward(ins[0], p[0].shape(), dy)],
        ),
        NodeKind::AuxiliaryCentering { groups } => (
            vec![ops::auxiliary_centering(dy, *groups).expect("shape checked in forward")],
            vec![],
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn single(kind: NodeKind, n: usize) -> Graph {
        let mut b = Graph::builder();
        let x = b.input("x", &[n]);
        let l = b.node("op", kind, &[], &[&x]);
        b.output("y", &l);
        b.build().unwrap()
    }

    #[test]
    fn single_layer_norm_graph() {
        let g = single(NodeKind::LayerNorm { eps: 0.0 }, 2);
        let x = Tensor::from_vec(vec![2.0, 0.0]);
        let (out, _) = forward(&g, &WeightStore::new(), &[x], EvalOptions::default()).unwrap();
        assert_eq!(out[0].data(), &[1.0, -1.0]);
    }

    #[test]
    fn pass_through_graph_returns_inputs() {
        let mut b = Graph::builder();
        let x = b.input("x", &[3]);
        b.output("y", &x);
        let g = b.build().unwrap();
        let x = Tensor::from_vec(vec![1.0, -2.0, 3.5]);
        let (out, _) = forward(&g, &WeightStore::new(), std::slice::from_ref(&x), EvalOptions::default()).unwrap();
        assert_eq!(out, vec![x]);
    }

    #[test]
    fn nan_input_names_the_node() {
        let g = single(NodeKind::Relu {}, 2);
        let x = Tensor::from_vec(vec![f64::NAN, 0.0]);
        let err = forward(&g, &WeightStore::new(), std::slice::from_ref(&x), EvalOptions::default()).unwrap_err();
        assert_eq!(err, EvalError::NonFiniteInput { node: NodeId::new("x") });
        assert!(forward(&g, &WeightStore::new(), &[x], EvalOptions { strict: false }).is_ok());
    }

    #[test]
    fn zero_variance_error_carries_node_id() {
        let g = single(NodeKind::LayerNorm { eps: 0.0 }, 2);
        let x = Tensor::from_vec(vec![3.0, 3.0]);
        let err = forward(&g, &WeightStore::new(), &[x], EvalOptions::default()).unwrap_err();
        assert!(err.to_string().starts_with("node op: layer_norm"), "{err}");
    }

    #[test]
    fn identity_linear_gradient_is_ones() {
        let mut b = Graph::builder();
        let x = b.input("x", &[2]);
        let l = b.node("fc", NodeKind::linear(), &["w"], &[&x]);
        b.output("y", &l);
        let g = b.build().unwrap();
        let mut w = WeightStore::new();
        w.insert("w", Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let (out, tape) = forward(&g, &w, &[Tensor::from_vec(vec![3.0, 4.0])], EvalOptions::default()).unwrap();
        let grads = backward(&tape, &Loss::SumOfOutputs.output_grads(&out)).unwrap();
        assert_eq!(grads.inputs[0].data(), &[1.0, 1.0]);
        assert_eq!(grads.params["w"].data(), &[3.0, 4.0, 3.0, 4.0]);
    }

    #[test]
    fn residual_gradient_reaches_both_branches() {
        let mut b = Graph::builder();
        let x1 = b.input("a", &[2]);
        let x2 = b.input("b", &[2]);
        let s = b.node("add", NodeKind::ResidualAdd { arity: 2 }, &[], &[&x1, &x2]);
        b.output("y", &s);
        let g = b.build().unwrap();
        let ins = [Tensor::from_vec(vec![1.0, 2.0]), Tensor::from_vec(vec![3.0, 4.0])];
        let (out, tape) = forward(&g, &WeightStore::new(), &ins, EvalOptions::default()).unwrap();
        assert_eq!(out[0].data(), &[4.0, 6.0]);
        let dy = Tensor::from_vec(vec![0.5, -1.0]);
        let grads = backward(&tape, std::slice::from_ref(&dy)).unwrap();
        assert_eq!(grads.inputs, vec![dy.clone(), dy]);
    }

    #[test]
    fn grad_shape_is_checked() {
        let g = single(NodeKind::Relu {}, 2);
        let (_, tape) = forward(&g, &WeightStore::new(), &[Tensor::from_vec(vec![1.0, 2.0])], EvalOptions::default())
            .unwrap();
        assert!(matches!(
            backward(&tape, &[Tensor::from_vec(vec![1.0])]),
            Err(EvalError::GradShape { .. })
        ));
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut b = Graph::builder();
        let x = b.input("x", &[3]);
        let l = b.node("fc", NodeKind::Linear { cbwc: Some(1) }, &["w", "b"], &[&x]);
        let n = b.node("ln", NodeKind::layer_norm(), &[], &[&l]);
        let s = b.node("sm", NodeKind::Softmax {}, &[], &[&n]);
        b.output("y", &s);
        let g = b.build().unwrap();
        let mut w = WeightStore::new();
        w.insert("w", Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
        w.insert("b", Tensor::from_vec(vec![0.1, 0.2, -0.3, 0.4]));
        let x = Tensor::from_vec(vec![0.3, -1.7, 0.2]);
        let (out, tape) = forward(&g, &w, &[x], EvalOptions::default()).unwrap();
        let again = tape.replay().unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out[0]), bits(&again[0]));
        // proxy layer feeds the norm a zero-mean vector
        let fc = &tape.entry("fc").unwrap().output;
        assert!(crate::tensor::mean(fc.data()).abs() < 1e-15);
    }
}
