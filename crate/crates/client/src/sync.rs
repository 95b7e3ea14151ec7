//! Upload staged inspections.
//!
//! Per inspection: frames first (only the blobs the server lacks), then
//! metadata, then the full bundle, which must hash to the local copy
//! before the entry is marked synced. Every step is idempotent, so an
//! interrupted run is finished by running it again.

use pipescan_core::domain::bundle_hash;

use crate::remote::Remote;
use crate::spool::{Spool, SpoolEntry, SyncState};
use crate::{ClientError, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SyncReport {
    /// Inspections confirmed by the server in this run.
    pub synced: Vec<String>,
    /// Inspections refused by the server, with the reason. Others proceed.
    pub failed: Vec<(String, String)>,
    /// Inspections already synced and left alone.
    pub up_to_date: usize,
    pub blobs_uploaded: usize,
    pub blobs_present: usize,
}

impl SyncReport {
    pub fn is_noop(&self) -> bool {
        self.synced.is_empty() && self.failed.is_empty() && self.blobs_uploaded == 0
    }
}

/// Sync every pending spool entry.
///
/// With nothing pending, no request is made. Otherwise the token is
/// checked before any write. A network failure stops the run and puts
/// the entry in flight back to its previous state; blobs the server
/// already acknowledged stay uploaded.
pub fn sync(spool: &Spool, remote: &Remote) -> Result<SyncReport> {
    let all = spool.list()?;
    let mut report = SyncReport {
        up_to_date: all.iter().filter(|e| e.state == SyncState::Synced).count(),
        ..SyncReport::default()
    };
    let pending: Vec<SpoolEntry> = all.into_iter().filter(|e| e.state != SyncState::Synced).collect();
    if pending.is_empty() {
        return Ok(report);
    }
    remote.me()?;
    for entry in pending {
        let id = entry.inspection.id.clone();
        spool.set_state(&id, SyncState::Uploading, entry.synced_hash.clone())?;
        match sync_one(spool, remote, &entry, &mut report) {
            Ok(hash) => {
                spool.set_state(&id, SyncState::Synced, Some(hash))?;
                report.synced.push(id);
            }
            Err(e @ ClientError::Api { .. }) => {
                spool.set_state(&id, entry.state, entry.synced_hash.clone())?;
                report.failed.push((id, e.to_string()));
            }
            Err(e) => {
                spool.set_state(&id, entry.state, entry.synced_hash.clone())?;
                return Err(e);
            }
        }
    }
    Ok(report)
}

fn sync_one(spool: &Spool, remote: &Remote, entry: &SpoolEntry, report: &mut SyncReport) -> Result<String> {
    let insp = &entry.inspection;
    let local_hash = insp.bundle_hash();

    let mut refs: Vec<String> = insp.frame_refs.clone();
    refs.extend(insp.depth_ref.clone());
    refs.extend(insp.annotations.iter().filter_map(|a| a.screenshot_ref.clone()));
    refs.sort();
    refs.dedup();
    let missing = remote.missing_blobs(&refs)?;
    report.blobs_present += refs.len() - missing.len();
    for id in &missing {
        remote.put_blob(&spool.blob(id)?)?;
        report.blobs_uploaded += 1;
    }

    remote.create_inspection(insp)?;
    let server = remote.bundle(&insp.id)?;
    if server.bundle_hash == local_hash {
        return Ok(local_hash);
    }
    let mut rev = remote.set_frames(&insp.id, &insp.frame_refs, insp.depth_ref.as_deref(), Some(server.revision))?;
    rev = remote.put_defects(&insp.id, &insp.annotations, Some(rev))?;
    if server.bundle["tags"] != serde_json::json!(insp.tags) {
        remote.put_tags(&insp.id, &insp.tags, Some(rev))?;
    }

    let after = remote.bundle(&insp.id)?;
    if after.bundle_hash != local_hash || bundle_hash(&after.bundle) != local_hash {
        return Err(ClientError::Api {
            status: 409,
            code: "bundle_mismatch".into(),
            message: format!("server bundle for {} differs from the local copy after upload", insp.id),
            body: after.bundle,
        });
    }
    Ok(local_hash)
}
