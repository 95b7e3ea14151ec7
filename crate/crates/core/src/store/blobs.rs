//! Content-addressed immutable blobs, keyed by lowercase SHA-256 hex.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use super::{fsync_dir, Result, StoreError};

pub fn blob_id(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn check_blob_id(id: &str) -> Result<()> {
    if id.len() == 64 && id.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
        Ok(())
    } else {
        Err(StoreError::InvalidId(id.to_string()))
    }
}

pub struct BlobStore {
    dir: PathBuf,
    tmp_counter: AtomicU64,
}

impl BlobStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let tmp = dir.join("tmp");
        fs::create_dir_all(&tmp).map_err(StoreError::io(&tmp))?;
        for e in fs::read_dir(&tmp).map_err(StoreError::io(&tmp))?.flatten() {
            let _ = fs::remove_file(e.path());
        }
        Ok(Self {
            dir,
            tmp_counter: AtomicU64::new(0),
        })
    }

    fn path_of(&self, id: &str) -> PathBuf {
        self.dir.join(&id[..2]).join(id)
    }

    /// Store bytes and return their id. Storing the same bytes twice is a no-op.
    pub fn put_blob(&self, bytes: &[u8]) -> Result<String> {
        let id = blob_id(bytes);
        let path = self.path_of(&id);
        if path.exists() {
            return Ok(id);
        }
        let shard = path.parent().unwrap();
        fs::create_dir_all(shard).map_err(StoreError::io(shard))?;
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = self.dir.join("tmp").join(format!("{id}.{}.{n}", std::process::id()));
        let mut f = File::create(&tmp).map_err(StoreError::io(&tmp))?;
        f.write_all(bytes).map_err(StoreError::io(&tmp))?;
        f.sync_all().map_err(StoreError::io(&tmp))?;
        fs::rename(&tmp, &path).map_err(StoreError::io(&path))?;
        fsync_dir(shard)?;
        Ok(id)
    }

    /// Store bytes that the caller claims hash to `id`.
    pub fn put_blob_with_id(&self, id: &str, bytes: &[u8]) -> Result<()> {
        check_blob_id(id)?;
        let actual = blob_id(bytes);
        if actual != id {
            return Err(StoreError::Invalid(format!("content hashes to {actual}, not {id}")));
        }
        self.put_blob(bytes).map(|_| ())
    }

    /// Read a blob, re-checking its hash.
    pub fn get_blob(&self, id: &str) -> Result<Vec<u8>> {
        check_blob_id(id)?;
        let path = self.path_of(id);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound {
                    kind: "blob",
                    id: id.to_string(),
                })
            }
            Err(e) => return Err(StoreError::Io { path, source: e }),
        };
        if blob_id(&bytes) != id {
            return Err(StoreError::Corruption { id: id.to_string() });
        }
        Ok(bytes)
    }

    pub fn has_blob(&self, id: &str) -> bool {
        check_blob_id(id).is_ok() && self.path_of(id).is_file()
    }

    /// The subset of `ids` not present, in input order.
    pub fn missing<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        ids.into_iter().filter(|id| !self.has_blob(id)).map(str::to_string).collect()
    }

    #[doc(hidden)]
    pub fn path_for_tests(&self, id: &str) -> PathBuf {
        self.path_of(id)
    }
}
