use thiserror::Error;

use crate::graph::NodeId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape {
        shape: Vec<usize>,
        reason: &'static str,
    },

    #[error("shape mismatch in `{op}`: {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },

    #[error("index {index} out of range {bound} in `{op}`")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("non-finite value produced by node {node:?} (`{op}`)")]
    NonFinite { node: NodeId, op: &'static str },

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("backward root must be scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("node {0:?} has not been evaluated; run forward first")]
    NotEvaluated(NodeId),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
