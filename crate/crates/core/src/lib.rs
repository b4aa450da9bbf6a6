//! Detect foldable LayerNorms in a computation graph, center the weights of
//! the upstream general linear layers, swap the LayerNorms for RMSNorm and
//! check that the rewritten model is equivalent.

pub mod apply;
pub mod cbwc;
pub mod detect;
pub mod fixtures;
pub mod graph;
pub mod tensor;
pub mod verify;
