//! Local staging area for inspections awaiting upload.
//!
//! The spool is a [`Store`] directory, so it uses the same on-disk format
//! as the server. Inspections live in the `inspections` collection and
//! their sync bookkeeping in `sync_state`.

use std::path::Path;

use chrono::{DateTime, Utc};
use pipescan_core::domain::{to_canonical_vec, DefectAnnotation, Inspection};
use pipescan_core::store::{blob_id, Query, Store, StoreError};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::{ClientError, Result};

const INSPECTIONS: &str = "inspections";
const SYNC_STATE: &str = "sync_state";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncState {
    LocalOnly,
    Uploading,
    Synced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StateDoc {
    state: SyncState,
    /// Server bundle hash acknowledged by the last successful sync.
    synced_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpoolEntry {
    pub inspection: Inspection,
    pub state: SyncState,
    pub synced_hash: Option<String>,
}

pub struct Spool {
    store: Store,
}

/// Stable id for a recording: the same title, time and frames always map
/// to the same inspection, so re-staging and re-syncing never duplicate it.
pub fn derive_id(title: &str, created_at: &DateTime<Utc>, frame_refs: &[String]) -> String {
    let key = to_canonical_vec(&json!({"title": title, "created_at": created_at, "frame_refs": frame_refs}))
        .expect("JSON values serialize");
    format!("insp-{}", &blob_id(&key)[..16])
}

impl Spool {
    pub fn open(dir: &Path) -> Result<Self> {
        Ok(Self { store: Store::open(dir)? })
    }

    /// Store frames and an inspection holding `annotations`.
    ///
    /// Staging identical content again changes nothing. Staging new
    /// annotations for a known recording replaces them and marks it
    /// `local_only`.
    pub fn stage(
        &self,
        title: &str,
        created_at: DateTime<Utc>,
        frames: &[Vec<u8>],
        annotations: Vec<DefectAnnotation>,
        tags: Vec<String>,
    ) -> Result<Inspection> {
        let mut refs = Vec::with_capacity(frames.len());
        for f in frames {
            refs.push(self.store.blobs().put_blob(f)?);
        }
        let id = derive_id(title, &created_at, &refs);
        let mut insp = Inspection::new(id.clone(), title, created_at);
        insp.frame_refs = refs;
        insp.annotations = annotations;
        insp.tags = tags;
        let problems = pipescan_core::domain::validate_inspection(&insp);
        if let Some(p) = problems.first() {
            return Err(ClientError::Validation(format!("inspection {id}: {p}")));
        }
        if let Some(existing) = self.get(&id)? {
            if existing.inspection.bundle() == insp.bundle() {
                return Ok(existing.inspection);
            }
        }
        self.put_inspection(&insp)?;
        self.set_state(&id, SyncState::LocalOnly, None)?;
        Ok(insp)
    }

    fn put_inspection(&self, insp: &Inspection) -> Result<()> {
        let doc = serde_json::to_value(insp).expect("inspections serialize");
        self.store.docs().put_document(INSPECTIONS, &insp.id, &doc, None)?;
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<Option<SpoolEntry>> {
        let Some(doc) = self.store.docs().get_document(INSPECTIONS, id) else {
            return Ok(None);
        };
        let inspection: Inspection = Inspection::deserialize(&*doc.doc).map_err(|e| bad(id, e))?;
        let state: StateDoc = match self.store.docs().get_document(SYNC_STATE, id) {
            Some(s) => StateDoc::deserialize(&*s.doc).map_err(|e| bad(id, e))?,
            None => StateDoc {
                state: SyncState::LocalOnly,
                synced_hash: None,
            },
        };
        Ok(Some(SpoolEntry {
            inspection,
            state: state.state,
            synced_hash: state.synced_hash,
        }))
    }

    /// Every staged inspection, by id.
    pub fn list(&self) -> Result<Vec<SpoolEntry>> {
        let ids: Vec<String> = self
            .store
            .docs()
            .list_documents(INSPECTIONS, &Query::default())
            .into_iter()
            .map(|(id, _)| id)
            .collect();
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            out.extend(self.get(&id)?);
        }
        out.sort_by(|a, b| a.inspection.id.cmp(&b.inspection.id));
        Ok(out)
    }

    pub fn pending(&self) -> Result<Vec<SpoolEntry>> {
        Ok(self.list()?.into_iter().filter(|e| e.state != SyncState::Synced).collect())
    }

    pub fn set_state(&self, id: &str, state: SyncState, synced_hash: Option<String>) -> Result<()> {
        let doc = serde_json::to_value(StateDoc { state, synced_hash }).expect("state serializes");
        self.store.docs().put_document(SYNC_STATE, id, &doc, None)?;
        Ok(())
    }

    pub fn blob(&self, id: &str) -> Result<Vec<u8>> {
        Ok(self.store.blobs().get_blob(id)?)
    }

    pub fn store(&self) -> &Store {
        &self.store
    }
}

fn bad(id: &str, e: serde_json::Error) -> ClientError {
    ClientError::Store(StoreError::Invalid(format!("spool entry {id}: {e}")))
}
