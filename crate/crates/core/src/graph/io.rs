//! Model files: a JSON topology document plus a raw little-endian weights
//! blob addressed by the manifest inside the topology.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Edge, Graph, Node, NodeId, NodeKind, Provenance, WeightStore, KIND_NAMES};
use crate::tensor::{DType, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("topology parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported format_version {0}, expected {FORMAT_VERSION}")]
    UnsupportedVersion(u32),
    #[error("node {node}: unknown node kind \"{kind}\"")]
    UnknownKind { node: String, kind: String },
    #[error("node {node}: invalid attrs for {kind}: {detail}")]
    InvalidAttrs {
        node: String,
        kind: String,
        detail: String,
    },
    #[error("duplicate node id {0}")]
    DuplicateNode(String),
    #[error("duplicate weight {0} in manifest")]
    DuplicateWeight(String),
    #[error("weight {name}: manifest byte_len {byte_len} does not match shape {shape:?} as {dtype}")]
    ManifestShape {
        name: String,
        shape: Vec<usize>,
        dtype: &'static str,
        byte_len: usize,
    },
    #[error("weight {name}: needs bytes {offset}..{end} but the blob has {available} bytes")]
    LengthMismatch {
        name: String,
        offset: usize,
        end: usize,
        available: usize,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct TopologyDoc {
    format_version: u32,
    nodes: Vec<NodeRecord>,
    edges: Vec<(NodeId, NodeId, usize)>,
    inputs: Vec<NodeId>,
    outputs: Vec<NodeId>,
    weights_manifest: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeRecord {
    id: String,
    kind: String,
    #[serde(default)]
    attrs: serde_json::Value,
    #[serde(default)]
    params: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
    byte_len: usize,
}

fn node_record(node: &Node) -> NodeRecord {
    let v = serde_json::to_value(&node.kind).expect("node kinds serialize");
    NodeRecord {
        id: node.id.to_string(),
        kind: node.kind.name().to_string(),
        attrs: v.get("attrs").cloned().unwrap_or_else(|| serde_json::json!({})),
        params: node.params.clone(),
    }
}

fn node_from_record(r: NodeRecord) -> Result<Node, ModelIoError> {
    if !KIND_NAMES.contains(&r.kind.as_str()) {
        return Err(ModelIoError::UnknownKind {
            node: r.id,
            kind: r.kind,
        });
    }
    let attrs = match r.attrs {
        serde_json::Value::Null => serde_json::json!({}),
        a => a,
    };
    let kind: NodeKind = serde_json::from_value(serde_json::json!({"kind": r.kind, "attrs": attrs}))
        .map_err(|e| ModelIoError::InvalidAttrs {
            node: r.id.clone(),
            kind: r.kind.clone(),
            detail: e.to_string(),
        })?;
    Ok(Node {
        id: NodeId::new(r.id),
        kind,
        params: r.params,
    })
}

/// Topology JSON text and weights blob for a model.
pub fn serialize_model(g: &Graph, w: &WeightStore) -> (String, Vec<u8>) {
    let mut blob = Vec::new();
    let mut manifest = Vec::with_capacity(w.len());
    for (name, t) in w.iter() {
        let offset = blob.len();
        match t.dtype() {
            DType::F32 => t
                .data()
                .iter()
                .for_each(|v| blob.extend_from_slice(&(*v as f32).to_le_bytes())),
            DType::F64 => t.data().iter().for_each(|v| blob.extend_from_slice(&v.to_le_bytes())),
        }
        manifest.push(ManifestEntry {
            name: name.clone(),
            dtype: t.dtype(),
            shape: t.shape().to_vec(),
            offset,
            byte_len: blob.len() - offset,
        });
    }
    let doc = TopologyDoc {
        format_version: FORMAT_VERSION,
        nodes: g.nodes().map(node_record).collect(),
        edges: g
            .edges()
            .iter()
            .map(|e| (e.src.clone(), e.dst.clone(), e.slot))
            .collect(),
        inputs: g.inputs().to_vec(),
        outputs: g.outputs().to_vec(),
        weights_manifest: manifest,
        provenance: g.provenance().cloned(),
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("topology serializes");
    text.push('\n');
    (text, blob)
}

/// Inverse of [`serialize_model`]. The result is not validated.
pub fn parse_model(topology: &str, blob: &[u8]) -> Result<(Graph, WeightStore), ModelIoError> {
    let doc: TopologyDoc = serde_json::from_str(topology).map_err(|e| ModelIoError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if doc.format_version != FORMAT_VERSION {
        return Err(ModelIoError::UnsupportedVersion(doc.format_version));
    }
    let mut g = Graph::default();
    for r in doc.nodes {
        let node = node_from_record(r)?;
        if g.nodes.contains_key(&node.id) {
            return Err(ModelIoError::DuplicateNode(node.id.to_string()));
        }
        g.nodes.insert(node.id.clone(), node);
    }
    g.edges = doc
        .edges
        .into_iter()
        .map(|(src, dst, slot)| Edge { src, dst, slot })
        .collect();
    g.inputs = doc.inputs;
    g.outputs = doc.outputs;
    g.provenance = doc.provenance;

    let mut w = WeightStore::new();
    for m in doc.weights_manifest {
        let count: usize = m.shape.iter().product();
        if count * m.dtype.size_of() != m.byte_len {
            return Err(ModelIoError::ManifestShape {
                name: m.name,
                shape: m.shape,
                dtype: m.dtype.as_str(),
                byte_len: m.byte_len,
            });
        }
        let end = m.offset + m.byte_len;
        let Some(bytes) = blob.get(m.offset..end) else {
            return Err(ModelIoError::LengthMismatch {
                name: m.name,
                offset: m.offset,
                end,
                available: blob.len(),
            });
        };
        let data: Vec<f64> = match m.dtype {
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
                .collect(),
            DType::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        };
        let t = Tensor::new(m.shape, data)
            .expect("length checked against manifest")
            .with_dtype(m.dtype);
        if w.insert(m.name.clone(), t).is_some() {
            return Err(ModelIoError::DuplicateWeight(m.name));
        }
    }
    Ok((g, w))
}

pub fn save_model(
    g: &Graph,
    w: &WeightStore,
    topology_path: &Path,
    weights_path: &Path,
) -> Result<(), ModelIoError> {
    let (text, blob) = serialize_model(g, w);
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ModelIoError::Io { path, source }
    };
    fs::write(topology_path, text).map_err(io(topology_path))?;
    fs::write(weights_path, blob).map_err(io(weights_path))?;
    Ok(())
}

pub fn load_model(topology_path: &Path, weights_path: &Path) -> Result<(Graph, WeightStore), ModelIoError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ModelIoError::Io { path, source }
    };
    let text = fs::read_to_string(topology_path).map_err(io(topology_path))?;
    let blob = fs::read(weights_path).map_err(io(weights_path))?;
    parse_model(&text, &blob)
}

/// SHA-256 over the serialized topology and weights, hex encoded.
pub fn model_hash(g: &Graph, w: &WeightStore) -> String {
    let (text, blob) = serialize_model(g, w);
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    h.update(&blob);
    hex::encode(h.finalize())
}
