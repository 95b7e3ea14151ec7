//! Versioned JSON documents with a per-collection write-ahead log.
//!
//! A write appends `{id, revision, doc}` to `wal.log` and fsyncs it, then
//! writes the document to a temp file, fsyncs, and renames it into place.
//! Reopening replays any logged write that did not reach its document file,
//! drops a torn log tail and stray temp files, then empties the log.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde_json::{json, Value};

use super::{check_name, fsync_dir, Result, StoreError};

const WAL_FILE: &str = "wal.log";
const TMP_SUFFIX: &str = ".tmp";
/// Log records kept before the log is emptied; every record is already applied.
const WAL_COMPACT_AFTER: usize = 64;

/// Steps of the write path where a test can simulate a crash.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashPoint {
    /// Half of the log record reaches disk.
    TornWal,
    /// Log record durable, document untouched.
    AfterWalAppend,
    /// Half of the temp file written.
    TornTemp,
    /// Temp file durable, not yet renamed.
    AfterTempWrite,
    /// Rename done, in-memory state not updated.
    AfterRename,
}

impl CrashPoint {
    pub const ALL: [CrashPoint; 5] = [
        CrashPoint::TornWal,
        CrashPoint::AfterWalAppend,
        CrashPoint::TornTemp,
        CrashPoint::AfterTempWrite,
        CrashPoint::AfterRename,
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct Versioned {
    pub revision: u64,
    pub doc: Arc<Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SortOrder {
    #[default]
    Ascending,
    Descending,
}

/// Equality filters on top-level or `/`-separated nested fields, an optional
/// sort field, then offset and limit. Ties keep id order.
#[derive(Debug, Clone, Default)]
pub struct Query {
    pub filters: Vec<(String, Value)>,
    pub sort: Option<(String, SortOrder)>,
    pub offset: usize,
    pub limit: Option<usize>,
}

impl Query {
    pub fn filter(mut self, field: &str, value: impl Into<Value>) -> Self {
        self.filters.push((field.to_string(), value.into()));
        self
    }

    pub fn sort_by(mut self, field: &str, order: SortOrder) -> Self {
        self.sort = Some((field.to_string(), order));
        self
    }

    pub fn offset(mut self, n: usize) -> Self {
        self.offset = n;
        self
    }

    pub fn limit(mut self, n: usize) -> Self {
        self.limit = Some(n);
        self
    }
}

pub(crate) fn field<'a>(doc: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('/').try_fold(doc, |v, key| v.get(key))
}

fn type_rank(v: &Value) -> u8 {
    match v {
        Value::Null => 0,
        Value::Bool(_) => 1,
        Value::Number(_) => 2,
        Value::String(_) => 3,
        Value::Array(_) => 4,
        Value::Object(_) => 5,
    }
}

/// Total order on JSON values: null < bool < number < string < array < object.
pub(crate) fn compare_values(a: &Value, b: &Value) -> std::cmp::Ordering {
    use std::cmp::Ordering;
    match (a, b) {
        (Value::Bool(x), Value::Bool(y)) => x.cmp(y),
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap_or(0.0), y.as_f64().unwrap_or(0.0));
            x.partial_cmp(&y).unwrap_or(Ordering::Equal)
        }
        (Value::String(x), Value::String(y)) => x.cmp(y),
        (Value::Array(x), Value::Array(y)) => {
            for (p, q) in x.iter().zip(y) {
                let o = compare_values(p, q);
                if o != Ordering::Equal {
                    return o;
                }
            }
            x.len().cmp(&y.len())
        }
        (Value::Object(_), Value::Object(_)) => a.to_string().cmp(&b.to_string()),
        _ => type_rank(a).cmp(&type_rank(b)),
    }
}

struct Collection {
    dir: PathBuf,
    docs: RwLock<BTreeMap<String, Versioned>>,
    /// Serializes writers; holds the open log and its record count.
    writer: Mutex<(File, usize)>,
}

pub struct DocumentStore {
    dir: PathBuf,
    collections: RwLock<HashMap<String, Arc<Collection>>>,
    crash: Mutex<Option<CrashPoint>>,
}

fn encode_record(collection: &str, id: &str, revision: u64, doc: Option<&Value>) -> Vec<u8> {
    let body = json!({"collection": collection, "id": id, "revision": revision, "doc": doc});
    let body = serde_json::to_vec(&body).expect("JSON values serialize");
    let mut out = Vec::with_capacity(body.len() + 8);
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

struct WalRecord {
    id: String,
    revision: u64,
    doc: Option<Value>,
}

/// Valid records plus the byte length of the valid prefix.
fn decode_wal(bytes: &[u8]) -> (Vec<WalRecord>, usize) {
    let mut out = Vec::new();
    let mut pos = 0;
    while bytes.len() - pos >= 8 {
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap());
        let Some(body) = bytes.get(pos + 8..pos + 8 + len) else { break };
        if crc32fast::hash(body) != crc {
            break;
        }
        let Ok(v) = serde_json::from_slice::<Value>(body) else { break };
        let (Some(id), Some(revision)) = (v["id"].as_str(), v["revision"].as_u64()) else { break };
        let doc = match &v["doc"] {
            Value::Null => None,
            d => Some(d.clone()),
        };
        out.push(WalRecord {
            id: id.to_string(),
            revision,
            doc,
        });
        pos += 8 + len;
    }
    (out, pos)
}

fn doc_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.json"))
}

fn write_atomic(dir: &Path, id: &str, revision: u64, doc: &Value) -> Result<()> {
    let bytes = serde_json::to_vec(&json!({"revision": revision, "doc": doc})).expect("JSON values serialize");
    let tmp = dir.join(format!("{id}.json{TMP_SUFFIX}"));
    let mut f = File::create(&tmp).map_err(StoreError::io(&tmp))?;
    f.write_all(&bytes).map_err(StoreError::io(&tmp))?;
    f.sync_all().map_err(StoreError::io(&tmp))?;
    let dst = doc_path(dir, id);
    fs::rename(&tmp, &dst).map_err(StoreError::io(&dst))?;
    fsync_dir(dir)
}

fn read_doc_file(path: &Path) -> Result<Versioned> {
    let bytes = fs::read(path).map_err(StoreError::io(path))?;
    let bad = |reason: String| StoreError::BadDocument {
        path: path.to_path_buf(),
        reason,
    };
    let v: Value = serde_json::from_slice(&bytes).map_err(|e| bad(e.to_string()))?;
    let revision = v["revision"].as_u64().ok_or_else(|| bad("missing revision".into()))?;
    let doc = v.get("doc").cloned().ok_or_else(|| bad("missing doc".into()))?;
    Ok(Versioned {
        revision,
        doc: Arc::new(doc),
    })
}

impl Collection {
    fn open(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).map_err(StoreError::io(&dir))?;
        let mut docs = BTreeMap::new();
        for entry in fs::read_dir(&dir).map_err(StoreError::io(&dir))? {
            let path = entry.map_err(StoreError::io(&dir))?.path();
            let fname = path.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string();
            if fname.ends_with(TMP_SUFFIX) {
                fs::remove_file(&path).map_err(StoreError::io(&path))?;
            } else if let Some(id) = fname.strip_suffix(".json") {
                docs.insert(id.to_string(), read_doc_file(&path)?);
            }
        }

        let wal_path = dir.join(WAL_FILE);
        let mut bytes = Vec::new();
        if wal_path.exists() {
            File::open(&wal_path)
                .and_then(|mut f| f.read_to_end(&mut bytes))
                .map_err(StoreError::io(&wal_path))?;
        }
        let (records, _valid) = decode_wal(&bytes);
        for r in records {
            let current = docs.get(&r.id).map_or(0, |v: &Versioned| v.revision);
            // A delete leaves no file, so its revision cannot be compared; a
            // logged delete is always replayed unless a newer put exists.
            let newer = r.revision > current || (r.doc.is_none() && current != 0 && r.revision >= current);
            if !newer {
                continue;
            }
            check_name(&r.id)?;
            match r.doc {
                Some(doc) => {
                    write_atomic(&dir, &r.id, r.revision, &doc)?;
                    docs.insert(
                        r.id,
                        Versioned {
                            revision: r.revision,
                            doc: Arc::new(doc),
                        },
                    );
                }
                None => {
                    let p = doc_path(&dir, &r.id);
                    if p.exists() {
                        fs::remove_file(&p).map_err(StoreError::io(&p))?;
                    }
                    docs.remove(&r.id);
                }
            }
        }
        // Everything in the log is applied now; a torn tail goes with it.
        File::create(&wal_path).map_err(StoreError::io(&wal_path))?;
        // append mode keeps writes at the end after the log is truncated
        let wal = OpenOptions::new()
            .append(true)
            .open(&wal_path)
            .map_err(StoreError::io(&wal_path))?;
        wal.sync_all().map_err(StoreError::io(&wal_path))?;
        fsync_dir(&dir)?;
        Ok(Self {
            dir,
            docs: RwLock::new(docs),
            writer: Mutex::new((wal, 0)),
        })
    }
}

impl DocumentStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(StoreError::io(&dir))?;
        let mut collections = HashMap::new();
        for entry in fs::read_dir(&dir).map_err(StoreError::io(&dir))? {
            let entry = entry.map_err(StoreError::io(&dir))?;
            if !entry.file_type().map_err(StoreError::io(&dir))?.is_dir() {
                continue;
            }
            let Some(name) = entry.file_name().to_str().map(str::to_string) else { continue };
            if check_name(&name).is_err() {
                continue;
            }
            let c = Collection::open(entry.path())?;
            collections.insert(name, Arc::new(c));
        }
        Ok(Self {
            dir,
            collections: RwLock::new(collections),
            crash: Mutex::new(None),
        })
    }

    /// Arm a one-shot simulated crash for the next write. After it fires the
    /// store must be dropped and reopened.
    #[doc(hidden)]
    pub fn inject_crash(&self, point: CrashPoint) {
        *self.crash.lock().unwrap() = Some(point);
    }

    fn crash_at(&self, point: CrashPoint) -> Result<()> {
        let mut armed = self.crash.lock().unwrap();
        if *armed == Some(point) {
            *armed = None;
            return Err(StoreError::InjectedCrash(point));
        }
        Ok(())
    }

    fn armed(&self, point: CrashPoint) -> bool {
        *self.crash.lock().unwrap() == Some(point)
    }

    fn collection(&self, name: &str) -> Option<Arc<Collection>> {
        self.collections.read().unwrap().get(name).cloned()
    }

    fn collection_or_create(&self, name: &str) -> Result<Arc<Collection>> {
        check_name(name)?;
        if let Some(c) = self.collection(name) {
            return Ok(c);
        }
        let mut map = self.collections.write().unwrap();
        if let Some(c) = map.get(name) {
            return Ok(c.clone());
        }
        let c = Arc::new(Collection::open(self.dir.join(name))?);
        map.insert(name.to_string(), c.clone());
        Ok(c)
    }

    /// Collection names, sorted.
    pub fn collections(&self) -> Vec<String> {
        let mut names: Vec<_> = self.collections.read().unwrap().keys().cloned().collect();
        names.sort();
        names
    }

    pub fn get_document(&self, collection: &str, id: &str) -> Option<Versioned> {
        self.collection(collection)?.docs.read().unwrap().get(id).cloned()
    }

    /// Write a document and return its new revision. With
    /// `expected_revision`, the write only happens if the current revision
    /// matches (0 meaning "does not exist yet").
    pub fn put_document(&self, collection: &str, id: &str, doc: &Value, expected_revision: Option<u64>) -> Result<u64> {
        check_name(id)?;
        let c = self.collection_or_create(collection)?;
        let mut writer = c.writer.lock().unwrap();
        let current = c.docs.read().unwrap().get(id).map_or(0, |v| v.revision);
        if let Some(expected) = expected_revision {
            if expected != current {
                return Err(StoreError::Conflict { current });
            }
        }
        let revision = current + 1;
        self.append_wal(&c, &mut writer, collection, id, revision, Some(doc))?;

        if self.armed(CrashPoint::TornTemp) {
            let tmp = c.dir.join(format!("{id}.json{TMP_SUFFIX}"));
            let bytes = serde_json::to_vec(&json!({"revision": revision, "doc": doc})).unwrap();
            fs::write(&tmp, &bytes[..bytes.len() / 2]).map_err(StoreError::io(&tmp))?;
            return self.crash_at(CrashPoint::TornTemp).map(|_| 0);
        }
        if self.armed(CrashPoint::AfterTempWrite) {
            let tmp = c.dir.join(format!("{id}.json{TMP_SUFFIX}"));
            let bytes = serde_json::to_vec(&json!({"revision": revision, "doc": doc})).unwrap();
            fs::write(&tmp, bytes).map_err(StoreError::io(&tmp))?;
            return self.crash_at(CrashPoint::AfterTempWrite).map(|_| 0);
        }
        write_atomic(&c.dir, id, revision, doc)?;
        self.crash_at(CrashPoint::AfterRename)?;

        c.docs.write().unwrap().insert(
            id.to_string(),
            Versioned {
                revision,
                doc: Arc::new(doc.clone()),
            },
        );
        self.maybe_compact(&mut writer)?;
        Ok(revision)
    }

    /// Remove a document. Returns false when it did not exist.
    pub fn delete_document(&self, collection: &str, id: &str, expected_revision: Option<u64>) -> Result<bool> {
        let Some(c) = self.collection(collection) else { return Ok(false) };
        let mut writer = c.writer.lock().unwrap();
        let current = c.docs.read().unwrap().get(id).map_or(0, |v| v.revision);
        if let Some(expected) = expected_revision {
            if expected != current {
                return Err(StoreError::Conflict { current });
            }
        }
        if current == 0 {
            return Ok(false);
        }
        self.append_wal(&c, &mut writer, collection, id, current, None)?;
        let p = doc_path(&c.dir, id);
        fs::remove_file(&p).map_err(StoreError::io(&p))?;
        fsync_dir(&c.dir)?;
        self.crash_at(CrashPoint::AfterRename)?;
        c.docs.write().unwrap().remove(id);
        self.maybe_compact(&mut writer)?;
        Ok(true)
    }

    fn append_wal(
        &self,
        c: &Collection,
        writer: &mut (File, usize),
        collection: &str,
        id: &str,
        revision: u64,
        doc: Option<&Value>,
    ) -> Result<()> {
        let wal_path = c.dir.join(WAL_FILE);
        let record = encode_record(collection, id, revision, doc);
        if self.armed(CrashPoint::TornWal) {
            writer.0.write_all(&record[..record.len() / 2]).map_err(StoreError::io(&wal_path))?;
            return self.crash_at(CrashPoint::TornWal);
        }
        writer.0.write_all(&record).map_err(StoreError::io(&wal_path))?;
        writer.0.sync_data().map_err(StoreError::io(&wal_path))?;
        writer.1 += 1;
        self.crash_at(CrashPoint::AfterWalAppend)
    }

    fn maybe_compact(&self, writer: &mut (File, usize)) -> Result<()> {
        if writer.1 >= WAL_COMPACT_AFTER {
            writer.0.set_len(0).map_err(|e| StoreError::Io {
                path: self.dir.clone(),
                source: e,
            })?;
            writer.0.sync_all().map_err(|e| StoreError::Io {
                path: self.dir.clone(),
                source: e,
            })?;
            writer.1 = 0;
        }
        Ok(())
    }

    /// Matching documents as `(id, versioned)`. Unknown collections are empty.
    pub fn list_documents(&self, collection: &str, query: &Query) -> Vec<(String, Versioned)> {
        let Some(c) = self.collection(collection) else { return Vec::new() };
        let docs = c.docs.read().unwrap();
        let mut out: Vec<(String, Versioned)> = docs
            .iter()
            .filter(|(_, v)| {
                query
                    .filters
                    .iter()
                    .all(|(f, want)| field(&v.doc, f).is_some_and(|got| got == want))
            })
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        drop(docs);
        if let Some((f, order)) = &query.sort {
            out.sort_by(|(_, a), (_, b)| {
                let o = compare_values(
                    field(&a.doc, f).unwrap_or(&Value::Null),
                    field(&b.doc, f).unwrap_or(&Value::Null),
                );
                match order {
                    SortOrder::Ascending => o,
                    SortOrder::Descending => o.reverse(),
                }
            });
        }
        out.into_iter()
            .skip(query.offset)
            .take(query.limit.unwrap_or(usize::MAX))
            .collect()
    }

    /// Number of documents matching the query filters.
    pub fn count_documents(&self, collection: &str, query: &Query) -> usize {
        let q = Query {
            filters: query.filters.clone(),
            ..Query::default()
        };
        self.list_documents(collection, &q).len()
    }

    /// Compare memory with disk; empty when consistent.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for name in self.collections() {
            let c = self.collection(&name).unwrap();
            let docs = c.docs.read().unwrap();
            let mut on_disk = 0;
            if let Ok(entries) = fs::read_dir(&c.dir) {
                for e in entries.flatten() {
                    let fname = e.file_name().to_string_lossy().to_string();
                    if fname.ends_with(TMP_SUFFIX) {
                        problems.push(format!("{name}: stray temp file {fname}"));
                    } else if let Some(id) = fname.strip_suffix(".json") {
                        on_disk += 1;
                        match read_doc_file(&e.path()) {
                            Ok(v) if docs.get(id) == Some(&v) => {}
                            Ok(_) => problems.push(format!("{name}/{id}: disk and memory differ")),
                            Err(err) => problems.push(format!("{name}/{id}: {err}")),
                        }
                    }
                }
            }
            if on_disk != docs.len() {
                problems.push(format!("{name}: {} documents in memory, {on_disk} on disk", docs.len()));
            }
        }
        problems
    }
}
