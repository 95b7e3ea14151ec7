mod common;

use std::sync::Arc;

use common::*;
use pipescan_client::analyze::{analyze_dir, load_model};
use pipescan_client::remote::Remote;
use pipescan_client::spool::{Spool, SyncState};
use pipescan_client::sync::sync;
use pipescan_client::transport::{Fault, FaultInjector, Offline, Request};
use pipescan_client::ClientError;
use pipescan_core::domain::{to_canonical_vec, PipelineParams};
use pipescan_core::store::Role;
use proptest::prelude::*;
use serde_json::json;

struct Field {
    _dir: tempfile::TempDir,
    spool: Spool,
}

/// Analyze a fixture and stage it, as a field run would.
fn field(frames: usize, defects: &[usize], seed: u64, title: &str) -> Field {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    write_frames(&input, frames, defects, seed);
    write_model(&dir.path().join("model.json"), 4);
    let (m, h) = load_model(&dir.path().join("model.json")).unwrap();
    let run = analyze_dir(&input, &PipelineParams::default(), Some((&m, &h)), Some(t0())).unwrap();
    let spool = Spool::open(&dir.path().join("spool")).unwrap();
    spool.stage(title, t0(), &run.frame_bytes, run.report.annotations.clone(), vec!["north".into()]).unwrap();
    Field { _dir: dir, spool }
}

fn is_blob_put(r: &Request) -> bool {
    r.method == "PUT" && r.path.starts_with("/api/inspections/blobs/")
}

#[test]
fn empty_spool_is_a_noop_without_network() {
    let dir = tempfile::tempdir().unwrap();
    let spool = Spool::open(dir.path()).unwrap();
    let offline = Arc::new(Offline::default());
    let report = sync(&spool, &Remote::new(offline.clone(), Some("t".into()))).unwrap();
    assert!(report.is_noop());
    assert_eq!(offline.attempts(), 0);
}

#[test]
fn offline_sync_fails_and_leaves_the_spool_alone() {
    let f = field(3, &[1], 5, "line 7");
    let before = f.spool.list().unwrap();
    let offline = Arc::new(Offline::default());
    let err = sync(&f.spool, &Remote::new(offline.clone(), Some("t".into()))).unwrap_err();
    assert!(matches!(err, ClientError::Network(_)));
    assert_eq!(err.exit_code(), 2);
    assert_eq!(offline.attempts(), 1);
    assert_eq!(f.spool.list().unwrap(), before);
}

#[test]
fn round_trip_matches_server_bundle() {
    let s = Server::new();
    let remote = s.remote("op", Role::Operator);
    let f = field(4, &[0, 2], 6, "line 1");
    let local = f.spool.list().unwrap().remove(0).inspection;
    let report = sync(&f.spool, &remote).unwrap();
    assert_eq!(report.synced, [local.id.clone()]);
    assert_eq!(report.blobs_uploaded, 4);
    let got = remote.bundle(&local.id).unwrap();
    assert_eq!(to_canonical_vec(&got.bundle).unwrap(), to_canonical_vec(&local.bundle()).unwrap());
    assert_eq!(got.bundle_hash, local.bundle_hash());
    let e = f.spool.get(&local.id).unwrap().unwrap();
    assert_eq!(e.state, SyncState::Synced);
    assert_eq!(e.synced_hash.as_deref(), Some(got.bundle_hash.as_str()));
    for r in &local.frame_refs {
        assert_eq!(&remote.get_blob(r).unwrap(), &f.spool.blob(r).unwrap());
    }
}

#[test]
fn dropped_reply_mid_upload_resumes_without_reuploading() {
    let s = Server::new();
    let token = s.token("op", Role::Operator);
    let f = field(5, &[1, 3], 7, "line 2");
    let local = f.spool.list().unwrap().remove(0).inspection;

    let faults = Arc::new(FaultInjector::new(ApiTransport(s.api.clone())));
    faults.fail_after(2, Fault::DropResponse, is_blob_put);
    let remote = Remote::new(faults.clone(), Some(token));
    let err = sync(&f.spool, &remote).unwrap_err();
    assert!(matches!(err, ClientError::Network(_)), "{err}");
    assert_eq!(f.spool.get(&local.id).unwrap().unwrap().state, SyncState::LocalOnly);
    assert_eq!(s.blob_files(), 3, "two acknowledged blobs and the one whose reply was lost");

    faults.clear_log();
    let report = sync(&f.spool, &remote).unwrap();
    assert_eq!(report.blobs_uploaded, 2);
    assert_eq!(report.blobs_present, 3);
    let puts = faults.delivered().iter().filter(|(m, p)| m == "PUT" && p.starts_with("/api/inspections/blobs/")).count();
    assert_eq!(puts, 2);
    assert_eq!(s.blob_files(), 5);
    assert_eq!(remote.bundle(&local.id).unwrap().bundle_hash, local.bundle_hash());

    faults.clear_log();
    assert!(sync(&f.spool, &remote).unwrap().is_noop());
    assert!(faults.delivered().is_empty(), "a synced spool makes no requests");
}

#[test]
fn bad_token_aborts_before_any_write() {
    let s = Server::new();
    let f = field(2, &[0], 8, "line 3");
    let faults = Arc::new(FaultInjector::new(ApiTransport(s.api.clone())));
    let err = sync(&f.spool, &Remote::new(faults.clone(), Some("forged".into()))).unwrap_err();
    assert!(matches!(err, ClientError::Auth(_)), "{err}");
    assert_eq!(err.exit_code(), 1);
    assert_eq!(faults.delivered(), [("GET".to_string(), "/api/auth/me".to_string())]);
    assert_eq!(s.blob_files(), 0);
    assert_eq!(f.spool.list().unwrap()[0].state, SyncState::LocalOnly);
}

#[test]
fn refused_inspection_does_not_stop_the_others() {
    let s = Server::new();
    let remote = s.remote("op", Role::Operator);
    let dir = tempfile::tempdir().unwrap();
    let spool = Spool::open(dir.path()).unwrap();
    let frames: Vec<Vec<u8>> = (0..2u8).map(|i| format!("P6\n1 1\n255\n{}{}{}", i as char, i as char, i as char).into_bytes()).collect();
    let a = spool.stage("a", t0(), &frames, vec![], vec![]).unwrap();
    let b = spool.stage("b", t0(), &frames[..1], vec![], vec![]).unwrap();
    // someone else already created "a" with other metadata
    let r = s.api.handle(
        &pipescan_server::services::ApiRequest::new("POST", "/api/inspections")
            .token(s.token("op2", Role::Operator))
            .json(&json!({"id": a.id, "title": "other", "created_at": t0()})),
    );
    assert_eq!(r.status, 201);
    let report = sync(&spool, &remote).unwrap();
    assert_eq!(report.synced, [b.id.clone()]);
    assert_eq!(report.failed.len(), 1);
    assert_eq!(report.failed[0].0, a.id);
    assert_eq!(spool.get(&a.id).unwrap().unwrap().state, SyncState::LocalOnly);
    assert_eq!(spool.get(&b.id).unwrap().unwrap().state, SyncState::Synced);
}

#[test]
fn resync_after_local_change_updates_the_server() {
    let s = Server::new();
    let remote = s.remote("op", Role::Operator);
    let f = field(3, &[0, 1], 10, "line 4");
    sync(&f.spool, &remote).unwrap();
    let e = f.spool.list().unwrap().remove(0);
    let mut anns = e.inspection.annotations.clone();
    anns.pop();
    let frames: Vec<Vec<u8>> = e.inspection.frame_refs.iter().map(|r| f.spool.blob(r).unwrap()).collect();
    let staged = f.spool.stage("line 4", t0(), &frames, anns, vec!["north".into(), "re-run".into()]).unwrap();
    assert_eq!(staged.id, e.inspection.id);
    let report = sync(&f.spool, &remote).unwrap();
    assert_eq!(report.blobs_uploaded, 0);
    assert_eq!(remote.bundle(&staged.id).unwrap().bundle_hash, staged.bundle_hash());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, .. ProptestConfig::default() })]

    /// Whatever request fails, and however, re-running sync converges to
    /// the same server state with one copy of each blob.
    #[test]
    fn sync_converges_after_any_single_fault(k in 0usize..14, drop_reply in any::<bool>()) {
        let s = Server::new();
        let token = s.token("op", Role::Operator);
        let f = field(3, &[0, 2], 11, "prop");
        let local = f.spool.list().unwrap().remove(0).inspection;
        let faults = Arc::new(FaultInjector::new(ApiTransport(s.api.clone())));
        let fault = if drop_reply { Fault::DropResponse } else { Fault::DropRequest };
        faults.fail_after(k, fault, |_| true);
        let remote = Remote::new(faults.clone(), Some(token));
        let first = sync(&f.spool, &remote);
        if first.is_err() {
            prop_assert!(matches!(first, Err(ClientError::Network(_))));
            prop_assert_ne!(f.spool.get(&local.id).unwrap().unwrap().state, SyncState::Synced);
            sync(&f.spool, &remote).unwrap();
        }
        prop_assert_eq!(f.spool.get(&local.id).unwrap().unwrap().state, SyncState::Synced);
        prop_assert_eq!(s.blob_files(), 3);
        let got = remote.bundle(&local.id).unwrap();
        prop_assert_eq!(got.bundle_hash, local.bundle_hash());
        let list = s.api.handle(&pipescan_server::services::ApiRequest::new("GET", "/api/inspections").token(s.token("op2", Role::Operator)));
        prop_assert_eq!(list.json_body()["total"].as_u64(), Some(1));
    }
}
