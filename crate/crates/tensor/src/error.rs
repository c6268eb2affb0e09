// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: cannot view {from:?} as {to:?} (element counts differ)")]
    Reshape {
        op: &'static str,
        from: Vec<usize>,
        to: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },
    #[error("index {index} out of range for axis of length {len}")]
    Index { index: usize, len: usize },
}

impl TensorError {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        TensorError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
