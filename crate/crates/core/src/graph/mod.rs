//! Computation-graph IR: typed nodes, directed edges with input slots, and
//! a named weight store.

mod io;
mod validate;

pub use io::{load_model, model_hash, parse_model, save_model, serialize_model, ModelIoError};
pub use validate::{infer_shapes, validate_graph, validate_topology, ValidationReport, Violation};

use std::borrow::Borrow;
use std::collections::{HashMap, VecDeque};
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

fn default_eps() -> f64 {
    DEFAULT_EPS
}

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

fn last_axis() -> i64 {
    -1
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        NodeId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Borrow<str> for NodeId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_string())
    }
}

impl From<String> for NodeId {
    fn from(s: String) -> Self {
        NodeId(s)
    }
}

/// Node variants with their attributes.
///
/// The general linear kinds carry an optional `cbwc` group count. When set,
/// the stored weights act as proxy parameters: the forward pass uses their
/// centered projection and the backward pass projects the gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "attrs")]
pub enum NodeKind {
    Linear {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cbwc: Option<usize>,
    },
    Conv2d {
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cbwc: Option<usize>,
    },
    RecurrentCell {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cbwc: Option<usize>,
    },
    AttentionValueProjection {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cbwc: Option<usize>,
    },
    LayerNorm {
        #[serde(default = "default_eps")]
        eps: f64,
    },
    #[serde(rename = "RMSNorm")]
    RmsNorm {
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default = "one")]
        groups: usize,
    },
    GroupNorm {
        groups: usize,
        #[serde(default = "default_eps")]
        eps: f64,
        /// Channel axis being normalized. Feature maps are channel-last, so
        /// only the last axis (`-1`) is accepted.
        #[serde(default = "last_axis")]
        axis: i64,
    },
    ScalarScale {
        scale: f64,
    },
    DropoutInference {
        p: f64,
        /// Inverted dropout rescales by `1 / (1 - p)` at training time and
        /// is the identity at inference; classic dropout scales by `1 - p`
        /// at inference.
        #[serde(default = "inverted_default")]
        inverted: bool,
        #[serde(default)]
        training: bool,
    },
    ResidualAdd {
        #[serde(default = "two")]
        arity: usize,
    },
    Concat {
        #[serde(default = "two")]
        arity: usize,
    },
    #[serde(rename = "ReLU")]
    Relu {},
    Softmax {},
    Embedding {},
    AuxiliaryCentering {
        #[serde(default = "one")]
        groups: usize,
    },
    Input {
        shape: Vec<usize>,
        /// Inputs holding token ids in `[0, vocab)` rather than real values.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        vocab: Option<usize>,
    },
    Output {},
}

fn inverted_default() -> bool {
    true
}

pub const KIND_NAMES: [&str; 17] = [
    "Linear",
    "Conv2d",
    "RecurrentCell",
    "AttentionValueProjection",
    "LayerNorm",
    "RMSNorm",
    "GroupNorm",
    "ScalarScale",
    "DropoutInference",
    "ResidualAdd",
    "Concat",
    "ReLU",
    "Softmax",
    "Embedding",
    "AuxiliaryCentering",
    "Input",
    "Output",
];

impl NodeKind {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Linear { .. } => "Linear",
            NodeKind::Conv2d { .. } => "Conv2d",
            NodeKind::RecurrentCell { .. } => "RecurrentCell",
            NodeKind::AttentionValueProjection { .. } => "AttentionValueProjection",
            NodeKind::LayerNorm { .. } => "LayerNorm",
            NodeKind::RmsNorm { .. } => "RMSNorm",
            NodeKind::GroupNorm { .. } => "GroupNorm",
            NodeKind::ScalarScale { .. } => "ScalarScale",
            NodeKind::DropoutInference { .. } => "DropoutInference",
            NodeKind::ResidualAdd { .. } => "ResidualAdd",
            NodeKind::Concat { .. } => "Concat",
            NodeKind::Relu {} => "ReLU",
            NodeKind::Softmax {} => "Softmax",
            NodeKind::Embedding {} => "Embedding",
            NodeKind::AuxiliaryCentering { .. } => "AuxiliaryCentering",
            NodeKind::Input { .. } => "Input",
            NodeKind::Output {} => "Output",
        }
    }

    pub fn linear() -> Self {
        NodeKind::Linear { cbwc: None }
    }

    pub fn layer_norm() -> Self {
        NodeKind::LayerNorm { eps: DEFAULT_EPS }
    }

    /// Number of incoming edges, one per slot.
    pub fn input_arity(&self) -> usize {
        match self {
            NodeKind::Input { .. } => 0,
            NodeKind::RecurrentCell { .. } | NodeKind::AttentionValueProjection { .. } => 2,
            NodeKind::ResidualAdd { arity } | NodeKind::Concat { arity } => *arity,
            _ => 1,
        }
    }

    /// Accepted range for the number of parameter references.
    pub fn param_count_range(&self) -> (usize, usize) {
        match self {
            NodeKind::Linear { .. }
            | NodeKind::Conv2d { .. }
            | NodeKind::AttentionValueProjection { .. } => (1, 2),
            NodeKind::RecurrentCell { .. } => (2, 3),
            NodeKind::LayerNorm { .. } | NodeKind::RmsNorm { .. } | NodeKind::GroupNorm { .. } => {
                (0, 2)
            }
            NodeKind::Embedding {} => (1, 1),
            _ => (0, 0),
        }
    }

    /// Proxy centering groups for general linear kinds.
    pub fn cbwc(&self) -> Option<usize> {
        match self {
            NodeKind::Linear { cbwc }
            | NodeKind::Conv2d { cbwc, .. }
            | NodeKind::RecurrentCell { cbwc }
            | NodeKind::AttentionValueProjection { cbwc } => *cbwc,
            _ => None,
        }
    }

    pub fn with_cbwc(&self, groups: usize) -> Option<NodeKind> {
        let mut k = self.clone();
        match &mut k {
            NodeKind::Linear { cbwc }
            | NodeKind::Conv2d { cbwc, .. }
            | NodeKind::RecurrentCell { cbwc }
            | NodeKind::AttentionValueProjection { cbwc } => *cbwc = Some(groups),
            _ => return None,
        }
        Some(k)
    }

    /// Normalization groups for the normalizing kinds (LayerNorm is 1).
    pub fn norm_groups(&self) -> Option<usize> {
        match self {
            NodeKind::LayerNorm { .. } => Some(1),
            NodeKind::RmsNorm { groups, .. } | NodeKind::GroupNorm { groups, .. } => Some(*groups),
            _ => None,
        }
    }

    pub fn is_centering_norm(&self) -> bool {
        matches!(self, NodeKind::LayerNorm { .. } | NodeKind::GroupNorm { .. })
    }

    /// Multiplier applied by the scale kinds.
    pub fn scale_factor(&self) -> Option<f64> {
        match self {
            NodeKind::ScalarScale { scale } => Some(*scale),
            NodeKind::DropoutInference { p, inverted, .. } => {
                Some(if *inverted { 1.0 } else { 1.0 - p })
            }
            _ => None,
        }
    }
}

/// Partition of node kinds driving the backtracking rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeClass {
    /// `V_l`: general linear layers whose output can be made zero-mean by
    /// centering their weights.
    #[serde(rename = "V_l")]
    GeneralLinear,
    /// `V_s`: scalar scaling, preserves zero mean.
    #[serde(rename = "V_s")]
    Scale,
    /// `V_r`: residual sum, zero-mean iff every branch is.
    #[serde(rename = "V_r")]
    Residual,
    /// `V_c`: intrinsically zero-mean output.
    #[serde(rename = "V_c")]
    Centering,
    /// `V_-`: everything else.
    #[serde(rename = "V_-")]
    Other,
}

impl fmt::Display for NodeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodeClass::GeneralLinear => "V_l",
            NodeClass::Scale => "V_s",
            NodeClass::Residual => "V_r",
            NodeClass::Centering => "V_c",
            NodeClass::Other => "V_-",
        })
    }
}

pub fn classify_node(kind: &NodeKind) -> NodeClass {
    match kind {
        NodeKind::Linear { .. }
        | NodeKind::Conv2d { .. }
        | NodeKind::RecurrentCell { .. }
        | NodeKind::AttentionValueProjection { .. } => NodeClass::GeneralLinear,
        NodeKind::ScalarScale { .. } | NodeKind::DropoutInference { .. } => NodeClass::Scale,
        NodeKind::ResidualAdd { .. } => NodeClass::Residual,
        NodeKind::AuxiliaryCentering { .. } => NodeClass::Centering,
        NodeKind::LayerNorm { .. }
        | NodeKind::RmsNorm { .. }
        | NodeKind::GroupNorm { .. }
        | NodeKind::Concat { .. }
        | NodeKind::Relu {}
        | NodeKind::Softmax {}
        | NodeKind::Embedding {}
        | NodeKind::Input { .. }
        | NodeKind::Output {} => NodeClass::Other,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    /// Parameter names, positional per kind: `[weight, bias?]` for Linear,
    /// Conv2d and AttentionValueProjection, `[w_input, w_hidden, bias?]`
    /// for RecurrentCell, `[gamma?, beta?]` for normalizations, `[table]`
    /// for Embedding.
    pub params: Vec<String>,
}

impl Node {
    pub fn class(&self) -> NodeClass {
        classify_node(&self.kind)
    }

    pub fn input_arity(&self) -> usize {
        self.kind.input_arity()
    }

    /// Name of the bias parameter for general linear kinds, if present.
    pub fn bias_param(&self) -> Option<&str> {
        let weights = match self.kind {
            NodeKind::RecurrentCell { .. } => 2,
            NodeKind::Linear { .. }
            | NodeKind::Conv2d { .. }
            | NodeKind::AttentionValueProjection { .. } => 1,
            _ => return None,
        };
        self.params.get(weights).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub src: NodeId,
    pub dst: NodeId,
    pub slot: usize,
}

/// Audit record attached to a folded model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub folded_from: String,
    pub mode: String,
    pub style: String,
    /// Nodes whose stored weights were replaced by their centered projection.
    #[serde(default)]
    pub centered: Vec<CenteredRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenteredRecord {
    pub node: NodeId,
    pub groups: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("duplicate node id {0}")]
    DuplicateId(NodeId),
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("cycle through ids {}", join_ids(.0))]
    Cycle(Vec<NodeId>),
}

pub(crate) fn join_ids(ids: &[NodeId]) -> String {
    ids.iter().map(NodeId::as_str).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Graph {
    pub(crate) nodes: IndexMap<NodeId, Node>,
    pub(crate) edges: Vec<Edge>,
    pub(crate) inputs: Vec<NodeId>,
    pub(crate) outputs: Vec<NodeId>,
    pub(crate) provenance: Option<Provenance>,
}

impl Graph {
    pub fn builder() -> GraphBuilder {
        GraphBuilder::default()
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    /// Producers feeding `id`, ordered by input slot.
    pub fn predecessors(&self, id: &str) -> Vec<&NodeId> {
        let mut ins: Vec<&Edge> = self.edges.iter().filter(|e| e.dst.as_str() == id).collect();
        ins.sort_by_key(|e| e.slot);
        ins.into_iter().map(|e| &e.src).collect()
    }

    /// Consumers of `id` with the slot they read it through, in edge order.
    pub fn successors(&self, id: &str) -> Vec<(&NodeId, usize)> {
        self.edges
            .iter()
            .filter(|e| e.src.as_str() == id)
            .map(|e| (&e.dst, e.slot))
            .collect()
    }

    /// Kahn's algorithm; ties are broken by node insertion order, so the
    /// result is deterministic.
    pub fn topo_order(&self) -> Result<Vec<NodeId>, GraphError> {
        let index: HashMap<&str, usize> = self
            .nodes
            .keys()
            .enumerate()
            .map(|(i, k)| (k.as_str(), i))
            .collect();
        let mut indegree = vec![0usize; self.nodes.len()];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            let s = *index
                .get(e.src.as_str())
                .ok_or_else(|| GraphError::UnknownNode(e.src.clone()))?;
            let d = *index
                .get(e.dst.as_str())
                .ok_or_else(|| GraphError::UnknownNode(e.dst.clone()))?;
            indegree[d] += 1;
            out[s].push(d);
        }
        let mut ready: std::collections::BTreeSet<usize> =
            (0..indegree.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &d in &out[i] {
                indegree[d] -= 1;
                if indegree[d] == 0 {
                    ready.insert(d);
                }
            }
        }
        let keys: Vec<&NodeId> = self.nodes.keys().collect();
        if order.len() != self.nodes.len() {
            let stuck = (0..indegree.len())
                .filter(|&i| indegree[i] > 0)
                .map(|i| keys[i].clone())
                .collect();
            return Err(GraphError::Cycle(stuck));
        }
        Ok(order.into_iter().map(|i| keys[i].clone()).collect())
    }

    /// Nodes reachable from `start` along edges, excluding `start`, in BFS
    /// order.
    pub fn descendants(&self, start: &str) -> Vec<NodeId> {
        let mut seen = std::collections::HashSet::new();
        let mut queue: VecDeque<&NodeId> = self.successors(start).into_iter().map(|(d, _)| d).collect();
        let mut out = Vec::new();
        while let Some(n) = queue.pop_front() {
            if seen.insert(n.clone()) {
                out.push(n.clone());
                queue.extend(self.successors(n.as_str()).into_iter().map(|(d, _)| d));
            }
        }
        out
    }

    /// Set the kind of an existing node.
    pub(crate) fn set_kind(&mut self, id: &str, kind: NodeKind) {
        if let Some(n) = self.nodes.get_mut(id) {
            n.kind = kind;
        }
    }

    pub(crate) fn set_provenance(&mut self, p: Option<Provenance>) {
        self.provenance = p;
    }

    /// Insert `new` on every out-edge of `src`: consumers of `src` are
    /// rewired to read `new`, which reads `src` through slot 0.
    pub(crate) fn insert_after(&mut self, src: &str, new: Node) {
        let new_id = new.id.clone();
        for e in &mut self.edges {
            if e.src.as_str() == src {
                e.src = new_id.clone();
            }
        }
        self.edges.push(Edge {
            src: NodeId::new(src),
            dst: new_id.clone(),
            slot: 0,
        });
        self.nodes.insert(new_id, new);
    }
}

/// Incremental graph construction. Nodes are added in order and wired to
/// already-existing producers.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    graph: Graph,
    errors: Vec<GraphError>,
}

impl GraphBuilder {
    pub fn input(&mut self, id: &str, shape: &[usize]) -> NodeId {
        let kind = NodeKind::Input {
            shape: shape.to_vec(),
            vocab: None,
        };
        self.add_input(id, kind)
    }

    pub fn token_input(&mut self, id: &str, shape: &[usize], vocab: usize) -> NodeId {
        let kind = NodeKind::Input {
            shape: shape.to_vec(),
            vocab: Some(vocab),
        };
        self.add_input(id, kind)
    }

    fn add_input(&mut self, id: &str, kind: NodeKind) -> NodeId {
        let nid = self.node(id, kind, &[], &[]);
        self.graph.inputs.push(nid.clone());
        nid
    }

    pub fn node(&mut self, id: &str, kind: NodeKind, params: &[&str], inputs: &[&NodeId]) -> NodeId {
        let nid = NodeId::new(id);
        if self.graph.nodes.contains_key(id) {
            self.errors.push(GraphError::DuplicateId(nid.clone()));
            return nid;
        }
        for (slot, src) in inputs.iter().enumerate() {
            if !self.graph.nodes.contains_key(src.as_str()) {
                self.errors.push(GraphError::UnknownNode((*src).clone()));
            }
            self.graph.edges.push(Edge {
                src: (*src).clone(),
                dst: nid.clone(),
                slot,
            });
        }
        self.graph.nodes.insert(
            nid.clone(),
            Node {
                id: nid.clone(),
                kind,
                params: params.iter().map(|s| s.to_string()).collect(),
            },
        );
        nid
    }

    pub fn output(&mut self, id: &str, src: &NodeId) -> NodeId {
        let nid = self.node(id, NodeKind::Output {}, &[], &[src]);
        self.graph.outputs.push(nid.clone());
        nid
    }

    /// Structural errors only; use [`validate_graph`] for a full check.
    pub fn build(self) -> Result<Graph, GraphError> {
        match self.errors.into_iter().next() {
            Some(e) => Err(e),
            None => Ok(self.graph),
        }
    }
}

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightStore {
    tensors: IndexMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

impl FromIterator<(String, Tensor)> for WeightStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        WeightStore {
            tensors: iter.into_iter().collect(),
        }
    }
}
