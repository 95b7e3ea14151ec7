//! Field client for pipe inspections.
//!
//! Frames are analyzed locally with no network access ([`analyze`]),
//! staged in a [`spool::Spool`], and uploaded later by [`sync`]. Downloaded
//! bundles can be re-annotated offline with [`review`].

pub mod analyze;
pub mod remote;
pub mod review;
pub mod spool;
pub mod sync;
pub mod transport;

use std::path::{Path, PathBuf};

use pipescan_core::store::StoreError;
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    /// Bad input: arguments, files, indexes out of range.
    #[error("{0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("network: {0}")]
    Network(String),
    #[error("not authorized: {0}")]
    Auth(String),
    #[error("server answered {status} {code}: {message}")]
    Api {
        status: u16,
        code: String,
        message: String,
        body: Value,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl ClientError {
    /// Process exit code: 1 for validation problems, 2 for I/O and network.
    pub fn exit_code(&self) -> u8 {
        match self {
            ClientError::Validation(_) | ClientError::Auth(_) => 1,
            ClientError::Api { status, .. } if *status < 500 => 1,
            _ => 2,
        }
    }

    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Api { code, .. } => Some(code),
            _ => None,
        }
    }
}

pub type Result<T, E = ClientError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ClientError + '_ {
    move |source| ClientError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write `bytes` to `path` through a temp file and rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}
