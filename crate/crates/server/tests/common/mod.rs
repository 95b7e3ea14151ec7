//! Shared in-process harness: a store in a temp dir, a mock clock and the
//! API, driven without HTTP. Jobs run only when a test steps the queue.
#![allow(dead_code)]

use std::sync::Arc;

use chrono::{DateTime, TimeZone, Utc};
use pipescan_core::domain::Frame;
use pipescan_core::imaging::pnm::encode_ppm;
use pipescan_core::store::{blob_id, Role, Store};
use pipescan_server::clock::MockClock;
use pipescan_server::services::{Api, ApiConfig, ApiRequest, ApiResponse};
use serde_json::{json, Value};

pub fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2026, 3, 10, 9, 0, 0).unwrap()
}

pub struct Harness {
    pub dir: tempfile::TempDir,
    pub clock: Arc<MockClock>,
    pub api: Api,
}

impl Harness {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(MockClock::new(t0()));
        let api = Self::open_api(dir.path(), &clock);
        Self { dir, clock, api }
    }

    pub fn open_api(root: &std::path::Path, clock: &Arc<MockClock>) -> Api {
        let store = Arc::new(Store::open(root).unwrap());
        Api::open(store, clock.clone(), ApiConfig::default()).unwrap()
    }

    /// Reopen over the same directory, as after a restart.
    pub fn reopen(&mut self) {
        self.api = Self::open_api(self.dir.path(), &self.clock);
    }

    pub fn user(&self, name: &str, role: Role) -> String {
        self.api.store().users().upsert_user(name, "pw-12345", role).unwrap();
        self.login(name, "pw-12345")
    }

    pub fn login(&self, name: &str, password: &str) -> String {
        let r = self.call("POST", "/api/auth/login", None, Some(json!({"username": name, "password": password})));
        assert_eq!(r.status, 200, "{}", String::from_utf8_lossy(&r.body));
        r.json_body()["token"].as_str().unwrap().to_string()
    }

    pub fn call(&self, method: &str, path: &str, token: Option<&str>, body: Option<Value>) -> ApiResponse {
        let (path, query) = match path.split_once('?') {
            Some((p, q)) => (p, q),
            None => (path, ""),
        };
        let mut req = ApiRequest::new(method, path);
        for kv in query.split('&').filter(|s| !s.is_empty()) {
            let (k, v) = kv.split_once('=').unwrap_or((kv, ""));
            req = req.query(k, v);
        }
        if let Some(t) = token {
            req = req.token(t);
        }
        if let Some(b) = body {
            req = req.json(&b);
        }
        self.api.handle(&req)
    }

    /// Call and assert the status, returning the JSON body.
    pub fn ok(&self, status: u16, method: &str, path: &str, token: &str, body: Option<Value>) -> Value {
        let r = self.call(method, path, Some(token), body);
        assert_eq!(r.status, status, "{method} {path}: {}", String::from_utf8_lossy(&r.body));
        r.json_body()
    }

    pub fn put_bytes(&self, token: &str, bytes: Vec<u8>) -> String {
        let id = blob_id(&bytes);
        let r = self.api.handle(&ApiRequest::new("PUT", &format!("/api/inspections/blobs/{id}")).token(token).bytes(bytes));
        assert!(r.status == 200 || r.status == 201, "{}", String::from_utf8_lossy(&r.body));
        id
    }

    pub fn put_frame(&self, token: &str, frame: &Frame) -> String {
        self.put_bytes(token, encode_ppm(frame))
    }

    /// Create an inspection holding `frames`.
    pub fn inspection(&self, token: &str, id: &str, frames: &[Frame]) -> Value {
        self.ok(201, "POST", "/api/inspections", token, Some(json!({"id": id, "title": format!("inspection {id}")})));
        let refs: Vec<String> = frames.iter().map(|f| self.put_frame(token, f)).collect();
        self.ok(200, "POST", &format!("/api/inspections/{id}/frames"), token, Some(json!({"frame_refs": refs})));
        self.ok(200, "GET", &format!("/api/inspections/{id}"), token, None)
    }

    /// Step the queue until it is empty; returns the jobs that ran.
    pub fn drain(&self) -> Vec<pipescan_server::jobs::Job> {
        let q = self.api.queue();
        let mut out = Vec::new();
        while let Some(j) = q.worker_step().unwrap() {
            out.push(j);
        }
        out
    }
}

/// Upload a synthetic two-class dataset through the wizard endpoints.
pub fn upload_dataset(h: &Harness, token: &str, id: &str, per_class: usize, seed: u64) -> (pipescan_core::dataset::Dataset, Vec<Frame>) {
    let (ds, frames) = pipescan_core::synth::two_class_dataset(id, per_class, 96, 64, seed);
    let classes: Vec<&str> = ds.classes.iter().map(|c| c.as_str()).collect();
    h.ok(201, "POST", "/api/ml/datasets", token, Some(json!({"id": id, "name": id, "classes": classes})));
    for (img, frame) in ds.images.iter().zip(&frames) {
        let blob = h.put_frame(token, frame);
        h.ok(201, "POST", &format!("/api/ml/datasets/{id}/images"), token, Some(json!({"image_ref": blob, "objects": img.objects})));
    }
    (ds, frames)
}

/// Dataset, split and retrain through the API; returns the new version id.
pub fn train_model(h: &Harness, admin: &str, id: &str, per_class: usize, seed: u64, params: Option<Value>) -> String {
    upload_dataset(h, admin, id, per_class, seed);
    h.ok(200, "POST", &format!("/api/ml/datasets/{id}/split"), admin, Some(json!({"train_fraction": 0.8, "seed": seed})));
    let body = params.map(|p| json!({ "params": p }));
    let job = h.ok(202, "POST", &format!("/api/ml/datasets/{id}/retrain"), admin, body);
    let done = h.drain();
    assert_eq!(done.len(), 1);
    assert_eq!(done[0].id, job["id"].as_str().unwrap());
    assert_eq!(done[0].state, pipescan_server::jobs::JobState::Succeeded, "{:?}", done[0].error);
    done[0].result_ref.clone().unwrap()
}
