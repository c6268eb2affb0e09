// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use kinaema_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Failures while decoding a dataset or checkpoint from disk.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoadError {
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("{what} is truncated: need bytes {start}..{end}, file has {available}")]
    Truncated {
        what: String,
        start: u64,
        end: u64,
        available: u64,
    },
    #[error("checksum mismatch in {what}: stored {stored:08x}, computed {computed:08x}")]
    Checksum { what: String, stored: u32, computed: u32 },
    #[error("incompatible contents: {0}")]
    Incompatible(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 configuration, 3 I/O, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) | Error::Domain(_) => 2,
            Error::Io { .. } | Error::Load(_) => 3,
            Error::Numeric(_) => 4,
            Error::Tensor(TensorError::NonFinite { .. }) => 4,
            Error::Tensor(_) => 2,
        }
    }
}
