//! In-process server for client tests: the API behind a [`Transport`]
//! adapter, a mock clock, and synthetic frame fixtures on disk.
#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, TimeZone, Utc};
use pipescan_client::remote::Remote;
use pipescan_client::transport::{Request, Response, Transport, TransportError};
use pipescan_core::dataset::XorShift64Star;
use pipescan_core::detect::{train_histogram_model, HistogramModel};
use pipescan_core::domain::{LabeledBox, PipelineParams};
use pipescan_core::imaging::pnm::encode_ppm;
use pipescan_core::store::{Role, Store};
use pipescan_core::synth::{gray_frame, render_defect, two_class_dataset, JUNCTION, MISALIGNED};
use pipescan_server::clock::MockClock;
use pipescan_server::services::{Api, ApiConfig, ApiRequest};

pub fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2026, 3, 10, 9, 0, 0).unwrap()
}

/// Hands requests straight to [`Api::handle`].
pub struct ApiTransport(pub Api);

impl Transport for ApiTransport {
    fn send(&self, req: &Request) -> Result<Response, TransportError> {
        let mut r = ApiRequest::new(&req.method, &req.path).bytes(req.body.clone());
        for (k, v) in &req.query {
            r = r.query(k, v);
        }
        if let Some(t) = &req.token {
            r = r.token(t.clone());
        }
        let resp = self.0.handle(&r);
        Ok(Response { status: resp.status, body: resp.body })
    }
}

pub struct Server {
    pub dir: tempfile::TempDir,
    pub clock: Arc<MockClock>,
    pub api: Api,
}

impl Server {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(MockClock::new(t0()));
        let store = Arc::new(Store::open(dir.path()).unwrap());
        let api = Api::open(store, clock.clone(), ApiConfig::default()).unwrap();
        Self { dir, clock, api }
    }

    pub fn transport(&self) -> Arc<ApiTransport> {
        Arc::new(ApiTransport(self.api.clone()))
    }

    /// Create or reset a user and log them in.
    pub fn token(&self, name: &str, role: Role) -> String {
        self.api.store().users().upsert_user(name, "pw-12345", role).unwrap();
        Remote::new(self.transport(), None).login(name, "pw-12345").unwrap()
    }

    /// A user and a logged-in remote for them.
    pub fn remote(&self, name: &str, role: Role) -> Remote {
        Remote::new(self.transport(), Some(self.token(name, role)))
    }

    pub fn blob_files(&self) -> usize {
        walk(&self.dir.path().join("blobs"))
    }
}

fn walk(dir: &Path) -> usize {
    let Ok(rd) = std::fs::read_dir(dir) else { return 0 };
    rd.flatten()
        .map(|e| {
            let p = e.path();
            if p.is_dir() {
                walk(&p)
            } else {
                usize::from(!p.extension().is_some_and(|x| x == "tmp"))
            }
        })
        .sum()
}

/// Write `n` numbered frames; frames whose index is in `defects` carry a
/// rendered defect. Returns the ground truth of those frames.
pub fn write_frames(dir: &Path, n: usize, defects: &[usize], seed: u64) -> Vec<(usize, LabeledBox)> {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = XorShift64Star::seed_from(seed);
    let mut truth = Vec::new();
    for i in 0..n {
        let frame = if defects.contains(&i) {
            let class = if truth.len() % 2 == 0 { JUNCTION } else { MISALIGNED };
            let (f, b) = render_defect(class, 96, 64, &mut rng);
            truth.push((i, b));
            f
        } else {
            gray_frame(96, 64, 110, &mut rng)
        };
        std::fs::write(dir.join(format!("frame_{i:04}.ppm")), encode_ppm(&frame)).unwrap();
    }
    truth
}

pub fn write_params(path: &Path, params: &PipelineParams) {
    std::fs::write(path, serde_json::to_vec(params).unwrap()).unwrap();
}

/// A model trained directly on a synthetic dataset.
pub fn model(seed: u64) -> HistogramModel {
    let (ds, frames) = two_class_dataset("train", 20, 96, 64, seed);
    let pairs: Vec<_> = ds.images.iter().zip(&frames).collect();
    train_histogram_model(&pairs, &ds.classes, PipelineParams::default(), "train").unwrap()
}

pub fn write_model(path: &Path, seed: u64) {
    std::fs::write(path, model(seed).to_json().unwrap()).unwrap();
}
