//! File-backed data layer: documents, blobs and users.
//!
//! On-disk layout under the store root:
//!
//! ```text
//! data/<collection>/<id>.json   {"revision": n, "doc": {...}}
//! data/<collection>/wal.log     write-ahead log, empty when idle
//! blobs/<hh>/<sha256-hex>       immutable content-addressed bytes
//! ```
//!
//! Users live in the `users` document collection.

mod blobs;
mod documents;
mod users;

use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use blobs::{blob_id, BlobStore};
pub use documents::{CrashPoint, DocumentStore, Query, SortOrder, Versioned};
pub use users::{check_password, hash_password, Role, UserRecord, UserStore, PASSWORD_ITERATIONS};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("revision conflict: current revision is {current}")]
    Conflict { current: u64 },
    #[error("{kind} {id} not found")]
    NotFound { kind: &'static str, id: String },
    #[error("blob {id} failed its content hash check")]
    Corruption { id: String },
    #[error("invalid identifier {0:?}")]
    InvalidId(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("injected crash at {0:?}")]
    InjectedCrash(CrashPoint),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: unreadable document: {reason}")]
    BadDocument { path: PathBuf, reason: String },
}

impl StoreError {
    pub(crate) fn io(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
        move |source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

/// Ids and collection names double as file names.
pub(crate) fn check_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name.len() <= 128
        && !name.starts_with('.')
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidId(name.to_string()))
    }
}

pub(crate) fn fsync_dir(dir: &Path) -> Result<()> {
    // Directory fsync persists renames; not supported everywhere, so best effort.
    if let Ok(f) = std::fs::File::open(dir) {
        let _ = f.sync_all();
    }
    Ok(())
}

/// The three stores opened together under one root directory.
pub struct Store {
    root: PathBuf,
    docs: DocumentStore,
    blobs: BlobStore,
}

impl Store {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        std::fs::create_dir_all(&root).map_err(StoreError::io(&root))?;
        let docs = DocumentStore::open(root.join("data"))?;
        let blobs = BlobStore::open(root.join("blobs"))?;
        Ok(Self { root, docs, blobs })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn docs(&self) -> &DocumentStore {
        &self.docs
    }

    pub fn blobs(&self) -> &BlobStore {
        &self.blobs
    }

    pub fn users(&self) -> UserStore<'_> {
        UserStore::new(&self.docs)
    }

    /// Every `(collection, document id, blob id)` where a document refers to
    /// a blob that does not exist. `refs` extracts blob ids from a document.
    pub fn dangling_blob_refs<F>(&self, refs: F) -> Vec<(String, String, String)>
    where
        F: Fn(&str, &serde_json::Value) -> Vec<String>,
    {
        let mut out = Vec::new();
        for collection in self.docs.collections() {
            for (id, v) in self.docs.list_documents(&collection, &Query::default()) {
                for blob in refs(&collection, &v.doc) {
                    if !self.blobs.has_blob(&blob) {
                        out.push((collection.clone(), id.clone(), blob));
                    }
                }
            }
        }
        out
    }

    /// Reopen-time consistency problems; empty when healthy.
    pub fn validate(&self) -> Vec<String> {
        self.docs.validate()
    }
}
