//! Analysis jobs, the dataset wizard, retraining and the model registry.
//!
//! An inspection is locked by `start_analysis` before its job is enqueued
//! and unlocked only when that job reaches a terminal state, whatever the
//! outcome. Model versions are immutable; one version per family is active.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use pipescan_core::dataset::{augment, parse_voc, split_dataset, AugmentationSpec, Dataset, DatasetError, ProvenanceRecord};
use pipescan_core::dataset::AnnotatedImage;
use pipescan_core::detect::{evaluate, predict_with_model, train_histogram_model, EvalReport, HistogramModel, DEFAULT_IOU_THRESHOLD};
use pipescan_core::domain::{AnnotationSource, DefectAnnotation, DefectClass, Frame, Inspection, LabeledBox, PipelineParams};
use pipescan_core::imaging::pnm::{decode_ppm, encode_ppm};
use pipescan_core::store::{Query, Store, StoreError};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ApiError, ApiResponse, Call, Ctx, DATASETS, INSPECTIONS};
use crate::clock::Clock;
use crate::jobs::{AnalyzePayload, CancelToken, Job, JobHandler, JobKind, JobState, RetrainPayload};

pub const MODELS: &str = "models";
pub const FAMILIES: &str = "model_families";
pub const DEFAULT_FAMILY: &str = "histogram";

/// A registered, immutable trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVersion {
    pub id: String,
    pub family: String,
    pub version: u32,
    pub created_at: DateTime<Utc>,
    pub dataset_id: String,
    pub job_id: String,
    /// Blob holding the model JSON.
    pub model_ref: String,
    pub params: PipelineParams,
    pub eval: EvalReport,
}

fn load_inspection(store: &Store, id: &str) -> Result<Inspection, String> {
    let v = store
        .docs()
        .get_document(INSPECTIONS, id)
        .ok_or_else(|| format!("inspection {id} not found"))?;
    let mut insp: Inspection = serde_json::from_value((*v.doc).clone()).map_err(|e| e.to_string())?;
    insp.revision = v.revision;
    Ok(insp)
}

fn save_inspection(store: &Store, insp: &mut Inspection) -> Result<u64, StoreError> {
    let expected = insp.revision;
    let mut doc = insp.clone();
    doc.revision = expected + 1;
    let value = serde_json::to_value(&doc).expect("inspections serialize");
    let rev = store.docs().put_document(INSPECTIONS, &insp.id, &value, Some(expected))?;
    insp.revision = rev;
    Ok(rev)
}

/// Clear the lock if set. Nothing else writes a locked inspection, so a
/// conflict only means a concurrent unlock; retry a few times anyway.
fn unlock(store: &Store, id: &str) -> Result<(), String> {
    for _ in 0..5 {
        let mut insp = load_inspection(store, id)?;
        if !insp.locked {
            return Ok(());
        }
        insp.locked = false;
        match save_inspection(store, &mut insp) {
            Ok(_) => return Ok(()),
            Err(StoreError::Conflict { .. }) => continue,
            Err(e) => return Err(e.to_string()),
        }
    }
    Err(format!("could not unlock inspection {id}"))
}

fn load_model_version(store: &Store, id: &str) -> Option<ModelVersion> {
    let v = store.docs().get_document(MODELS, id)?;
    serde_json::from_value((*v.doc).clone()).ok()
}

fn load_model(store: &Store, mv: &ModelVersion) -> Result<HistogramModel, String> {
    let bytes = store.blobs().get_blob(&mv.model_ref).map_err(|e| e.to_string())?;
    let text = String::from_utf8(bytes).map_err(|e| e.to_string())?;
    HistogramModel::from_json(&text).map_err(|e| e.to_string())
}

fn load_frame(store: &Store, blob: &str) -> Result<Frame, String> {
    let bytes = store.blobs().get_blob(blob).map_err(|e| format!("frame {blob}: {e}"))?;
    decode_ppm(&bytes).map_err(|e| format!("frame {blob}: {e}"))
}

fn active_version(store: &Store, family: &str) -> Option<String> {
    let v = store.docs().get_document(FAMILIES, family)?;
    v.doc["active"].as_str().map(str::to_string)
}

fn set_active(store: &Store, family: &str, version_id: &str) -> Result<(), StoreError> {
    store
        .docs()
        .put_document(FAMILIES, family, &json!({"family": family, "active": version_id}), None)
        .map(|_| ())
}

fn load_dataset(store: &Store, id: &str) -> Option<(Dataset, u64)> {
    let v = store.docs().get_document(DATASETS, id)?;
    serde_json::from_value((*v.doc).clone()).ok().map(|d| (d, v.revision))
}

/// Runs jobs from the ML queue.
pub struct MlHandler {
    store: Arc<Store>,
    clock: Arc<dyn Clock>,
}

impl MlHandler {
    pub fn new(store: Arc<Store>, clock: Arc<dyn Clock>) -> Self {
        Self { store, clock }
    }

    fn analyze(&self, job: &Job, cancel: &CancelToken) -> Result<String, String> {
        let p: AnalyzePayload = serde_json::from_value(job.payload.clone()).map_err(|e| e.to_string())?;
        let mv = load_model_version(&self.store, &p.model_version_id)
            .ok_or_else(|| format!("model version {} not found", p.model_version_id))?;
        let model = load_model(&self.store, &mv)?;
        let insp = load_inspection(&self.store, &p.inspection_id)?;
        let mut found = Vec::new();
        for (i, blob) in insp.frame_refs.iter().enumerate() {
            if cancel.is_cancelled() {
                return Err(crate::jobs::CANCELLED.into());
            }
            let frame = load_frame(&self.store, blob)?;
            let now = self.clock.now();
            found.extend(predict_with_model(&model, &frame).into_iter().map(|detection| DefectAnnotation {
                frame_index: i as u32,
                detection,
                source: AnnotationSource::Automatic,
                params: model.params,
                screenshot_ref: None,
                created_at: now,
            }));
        }
        if cancel.is_cancelled() {
            return Err(crate::jobs::CANCELLED.into());
        }
        // Results land while the lock is still held; finalize releases it.
        let mut insp = load_inspection(&self.store, &p.inspection_id)?;
        insp.annotations.extend(found);
        let rev = save_inspection(&self.store, &mut insp).map_err(|e| e.to_string())?;
        Ok(format!("{}@{rev}", insp.id))
    }

    fn retrain(&self, job: &Job, cancel: &CancelToken) -> Result<String, String> {
        let p: RetrainPayload = serde_json::from_value(job.payload.clone()).map_err(|e| e.to_string())?;
        let family = p.family.unwrap_or_else(|| DEFAULT_FAMILY.to_string());
        let params = p.params.unwrap_or_default();
        let (ds, _) = load_dataset(&self.store, &p.dataset_id).ok_or_else(|| format!("dataset {} not found", p.dataset_id))?;
        let split = ds.split.clone().ok_or("dataset has no split")?;
        let load_all = |idx: &[usize]| -> Result<Vec<(AnnotatedImage, Frame)>, String> {
            idx.iter()
                .map(|&i| {
                    let img = ds.images[i].clone();
                    load_frame(&self.store, &img.image_ref).map(|f| (img, f))
                })
                .collect()
        };
        let train = load_all(&split.train)?;
        if cancel.is_cancelled() {
            return Err(crate::jobs::CANCELLED.into());
        }
        let pairs: Vec<(&AnnotatedImage, &Frame)> = train.iter().map(|(a, f)| (a, f)).collect();
        let model = train_histogram_model(&pairs, &ds.classes, params, &ds.id).map_err(|e| e.to_string())?;
        if cancel.is_cancelled() {
            return Err(crate::jobs::CANCELLED.into());
        }
        let test = load_all(&split.test)?;
        let tpairs: Vec<(&AnnotatedImage, &Frame)> = test.iter().map(|(a, f)| (a, f)).collect();
        let eval = evaluate(&model, &tpairs, DEFAULT_IOU_THRESHOLD).map_err(|e| e.to_string())?;

        let model_ref = self
            .store
            .blobs()
            .put_blob(model.to_json().map_err(|e| e.to_string())?.as_bytes())
            .map_err(|e| e.to_string())?;
        let existing = self
            .store
            .docs()
            .count_documents(MODELS, &Query::default().filter("family", family.as_str()));
        let version = existing as u32 + 1;
        let id = format!("{family}-v{version:04}");
        let mv = ModelVersion {
            id: id.clone(),
            family: family.clone(),
            version,
            created_at: self.clock.now(),
            dataset_id: ds.id.clone(),
            job_id: job.id.clone(),
            model_ref,
            params,
            eval,
        };
        let doc = serde_json::to_value(&mv).expect("model versions serialize");
        // Expected revision 0: versions are never overwritten.
        self.store.docs().put_document(MODELS, &id, &doc, Some(0)).map_err(|e| e.to_string())?;
        if active_version(&self.store, &family).is_none() {
            set_active(&self.store, &family, &id).map_err(|e| e.to_string())?;
        }
        Ok(id)
    }
}

impl JobHandler for MlHandler {
    fn run(&self, job: &Job, cancel: &CancelToken) -> Result<String, String> {
        match job.kind {
            JobKind::AnalyzeInspection => self.analyze(job, cancel),
            JobKind::RetrainModel => self.retrain(job, cancel),
        }
    }

    fn finalize(&self, job: &Job) {
        if job.kind != JobKind::AnalyzeInspection {
            return;
        }
        if let Some(id) = job.payload["inspection_id"].as_str() {
            if let Err(e) = unlock(&self.store, id) {
                eprintln!("job {}: {e}", job.id);
            }
        }
    }
}

/// Unlock inspections that no queued or running analysis job refers to,
/// e.g. after a crash between locking and enqueueing.
pub(super) fn reconcile_locks(ctx: &Ctx) -> Result<(), ApiError> {
    let live: HashSet<String> = ctx
        .queue
        .list_jobs(None)
        .into_iter()
        .filter(|j| j.kind == JobKind::AnalyzeInspection && !j.state.is_terminal())
        .filter_map(|j| j.payload["inspection_id"].as_str().map(str::to_string))
        .collect();
    let locked = ctx
        .store
        .docs()
        .list_documents(INSPECTIONS, &Query::default().filter("locked", true));
    for (id, _) in locked {
        if !live.contains(&id) {
            unlock(&ctx.store, &id).map_err(ApiError::internal)?;
        }
    }
    Ok(())
}

fn job_json(job: &Job) -> Value {
    serde_json::to_value(job).expect("jobs serialize")
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnalysisBody {
    inspection_id: String,
    #[serde(default)]
    model_version_id: Option<String>,
}

pub(super) fn start_analysis(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let body: AnalysisBody = call.json()?;
    let model_id = match body.model_version_id {
        Some(m) => m,
        None => active_version(&ctx.store, DEFAULT_FAMILY).ok_or_else(|| ApiError::not_found("no active model"))?,
    };
    if load_model_version(&ctx.store, &model_id).is_none() {
        return Err(ApiError::not_found(format!("model version {model_id} not found")));
    }
    let mut insp = super::entrypoint::load_inspection(ctx, &body.inspection_id)?;
    if insp.locked {
        return Err(ApiError::locked(&insp.id));
    }
    if insp.frame_refs.is_empty() {
        return Err(ApiError::validation("inspection has no frames"));
    }
    insp.locked = true;
    save_inspection(&ctx.store, &mut insp).map_err(|e| match e {
        // someone else changed or locked it since we read it
        StoreError::Conflict { .. } => ApiError::locked(&insp.id),
        other => other.into(),
    })?;
    let payload = json!({"inspection_id": insp.id, "model_version_id": model_id});
    match ctx.queue.enqueue(JobKind::AnalyzeInspection, payload) {
        Ok(job) => Ok(ApiResponse::json(202, &job_json(&job))),
        Err(e) => {
            let _ = unlock(&ctx.store, &insp.id);
            Err(e.into())
        }
    }
}

pub(super) fn list_jobs(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let state = match call.query.get("state") {
        None => None,
        Some(s) => Some(JobState::parse(s).ok_or_else(|| ApiError::bad_request(format!("unknown job state {s:?}")))?),
    };
    let jobs: Vec<Value> = ctx.queue.list_jobs(state).iter().map(job_json).collect();
    Ok(ApiResponse::ok(json!({ "jobs": jobs })))
}

pub(super) fn get_job(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let id = call.param("job_id");
    let job = ctx.queue.get_job(id).ok_or_else(|| ApiError::not_found(format!("job {id} not found")))?;
    Ok(ApiResponse::ok(job_json(&job)))
}

pub(super) fn cancel_job(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let job = ctx.queue.cancel(call.param("job_id"))?;
    Ok(ApiResponse::ok(job_json(&job)))
}

fn dataset_summary(ds: &Dataset, revision: u64) -> Value {
    let mut per_class: BTreeMap<String, Value> = BTreeMap::new();
    let side = |idx: Option<&Vec<usize>>, class: &DefectClass| {
        idx.map_or(0, |v| v.iter().filter(|&&i| ds.images[i].dominant_class() == Some(class)).count())
    };
    for c in &ds.classes {
        let images = ds.images.iter().filter(|i| i.dominant_class() == Some(c)).count();
        let objects: usize = ds.images.iter().map(|i| i.objects.iter().filter(|o| &o.class == c).count()).sum();
        per_class.insert(
            c.as_str().to_string(),
            json!({
                "images": images,
                "objects": objects,
                "train": side(ds.split.as_ref().map(|s| &s.train), c),
                "test": side(ds.split.as_ref().map(|s| &s.test), c),
            }),
        );
    }
    json!({
        "id": ds.id,
        "name": ds.name,
        "classes": ds.classes,
        "image_count": ds.images.len(),
        "has_split": ds.split.is_some(),
        "train_count": ds.split.as_ref().map_or(0, |s| s.train.len()),
        "test_count": ds.split.as_ref().map_or(0, |s| s.test.len()),
        "per_class": per_class,
        "revision": revision,
    })
}

fn save_dataset(ctx: &Ctx, ds: &Dataset, expected: u64) -> Result<u64, ApiError> {
    let problems = ds.problems();
    if !problems.is_empty() {
        return Err(ApiError::validation(problems.join("; ")));
    }
    let doc = serde_json::to_value(ds).expect("datasets serialize");
    Ok(ctx.store.docs().put_document(DATASETS, &ds.id, &doc, Some(expected))?)
}

fn get_ds(ctx: &Ctx, id: &str) -> Result<(Dataset, u64), ApiError> {
    load_dataset(&ctx.store, id).ok_or_else(|| ApiError::not_found(format!("dataset {id} not found")))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateDatasetBody {
    #[serde(default)]
    id: Option<String>,
    name: String,
    classes: Vec<String>,
}

pub(super) fn create_dataset(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let body: CreateDatasetBody = call.json()?;
    let classes = pipescan_core::domain::class_set(body.classes).map_err(|e| ApiError::validation(e.to_string()))?;
    if classes.is_empty() {
        return Err(ApiError::validation("at least one class is required"));
    }
    let id = body.id.unwrap_or_else(|| {
        let mut raw = [0u8; 8];
        rand::thread_rng().fill_bytes(&mut raw);
        format!("ds-{}", hex::encode(raw))
    });
    let ds = Dataset::new(id.clone(), body.name, classes);
    let rev = save_dataset(ctx, &ds, 0).map_err(|e| {
        if e.code == "revision_conflict" {
            ApiError::conflict(format!("dataset {id} already exists"))
        } else {
            e
        }
    })?;
    Ok(ApiResponse::json(201, &dataset_summary(&ds, rev)))
}

pub(super) fn list_datasets(ctx: &Ctx, _call: &Call) -> Result<ApiResponse, ApiError> {
    let list: Vec<Value> = ctx
        .store
        .docs()
        .list_documents(DATASETS, &Query::default())
        .into_iter()
        .filter_map(|(_, v)| serde_json::from_value::<Dataset>((*v.doc).clone()).ok().map(|d| dataset_summary(&d, v.revision)))
        .collect();
    Ok(ApiResponse::ok(json!({ "datasets": list })))
}

pub(super) fn get_dataset(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let (ds, rev) = get_ds(ctx, call.param("dataset_id"))?;
    let mut out = dataset_summary(&ds, rev);
    out["dataset"] = serde_json::to_value(&ds).expect("datasets serialize");
    Ok(ApiResponse::ok(out))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AddImageBody {
    image_ref: String,
    #[serde(default)]
    voc_xml: Option<String>,
    #[serde(default)]
    objects: Option<Vec<LabeledBox>>,
}

/// Append one labeled image. Any existing split is dropped, since it no
/// longer covers every image.
pub(super) fn add_image(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let body: AddImageBody = call.json()?;
    let (mut ds, rev) = get_ds(ctx, call.param("dataset_id"))?;
    if !ctx.store.blobs().has_blob(&body.image_ref) {
        return Err(ApiError::new(400, "missing_blobs", format!("image blob {} is not stored", body.image_ref)));
    }
    let frame = load_frame(&ctx.store, &body.image_ref).map_err(ApiError::validation)?;
    let objects = match (body.voc_xml, body.objects) {
        (Some(_), Some(_)) => return Err(ApiError::bad_request("give voc_xml or objects, not both")),
        (Some(xml), None) => {
            let parsed = parse_voc(&xml).map_err(|e| ApiError::validation(format!("VOC annotation: {e}")))?;
            if (parsed.width, parsed.height) != (frame.width, frame.height) {
                return Err(ApiError::validation(format!(
                    "VOC size {}x{} does not match image {}x{}",
                    parsed.width, parsed.height, frame.width, frame.height
                )));
            }
            parsed.objects
        }
        (None, objects) => objects.unwrap_or_default(),
    };
    ds.images.push(AnnotatedImage {
        image_ref: body.image_ref,
        width: frame.width,
        height: frame.height,
        objects,
    });
    ds.split = None;
    let rev = save_dataset(ctx, &ds, rev)?;
    Ok(ApiResponse::json(201, &json!({"index": ds.images.len() - 1, "image_count": ds.images.len(), "revision": rev})))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AugmentBody {
    spec: AugmentationSpec,
    seed: u64,
    #[serde(default)]
    images: Option<Vec<usize>>,
}

pub(super) fn augment_dataset(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let body: AugmentBody = call.json()?;
    let (mut ds, rev) = get_ds(ctx, call.param("dataset_id"))?;
    let sources = body.images.unwrap_or_else(|| (0..ds.images.len()).collect());
    let mut added = 0;
    for &src in &sources {
        let img = ds
            .images
            .get(src)
            .cloned()
            .ok_or_else(|| ApiError::validation(format!("image index {src} out of range")))?;
        let frame = load_frame(&ctx.store, &img.image_ref).map_err(ApiError::internal)?;
        let outputs = augment(&img, &frame, &body.spec, body.seed).map_err(|e| ApiError::validation(e.to_string()))?;
        for (k, (mut out_img, out_frame)) in outputs.into_iter().enumerate() {
            out_img.image_ref = ctx.store.blobs().put_blob(&encode_ppm(&out_frame))?;
            ds.provenance.push(ProvenanceRecord {
                image: ds.images.len(),
                source: src,
                op: body.spec.ops[k].clone(),
                seed: body.seed,
            });
            ds.images.push(out_img);
            added += 1;
        }
    }
    if added > 0 {
        ds.split = None;
    }
    let rev = save_dataset(ctx, &ds, rev)?;
    Ok(ApiResponse::ok(json!({"added": added, "image_count": ds.images.len(), "revision": rev})))
}

fn default_true() -> bool {
    true
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitBody {
    train_fraction: f64,
    seed: u64,
    #[serde(default = "default_true")]
    stratified: bool,
}

pub(super) fn split(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let body: SplitBody = call.json()?;
    let (ds, rev) = get_ds(ctx, call.param("dataset_id"))?;
    let out = split_dataset(&ds, body.train_fraction, body.seed, body.stratified).map_err(|e| match e {
        DatasetError::EmptySide(c) => ApiError::validation(format!("split leaves class {c} with an empty side")),
        other => ApiError::validation(other.to_string()),
    })?;
    let rev = save_dataset(ctx, &out, rev)?;
    Ok(ApiResponse::ok(dataset_summary(&out, rev)))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RetrainBody {
    #[serde(default)]
    family: Option<String>,
    #[serde(default)]
    params: Option<PipelineParams>,
}

pub(super) fn start_retrain(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let body: RetrainBody = if call.body.is_empty() { RetrainBody::default() } else { call.json()? };
    let id = call.param("dataset_id");
    let (ds, _) = get_ds(ctx, id)?;
    if ds.split.is_none() {
        return Err(ApiError::validation("dataset has no train/test split"));
    }
    if let Some(f) = &body.family {
        let ok = !f.is_empty() && f.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-');
        if !ok {
            return Err(ApiError::validation("family must be letters, digits, '-' or '_'"));
        }
    }
    let mut payload = json!({ "dataset_id": id });
    if let Some(f) = body.family {
        payload["family"] = json!(f);
    }
    if let Some(p) = body.params {
        payload["params"] = serde_json::to_value(p).expect("params serialize");
    }
    let job = ctx.queue.enqueue(JobKind::RetrainModel, payload)?;
    Ok(ApiResponse::json(202, &job_json(&job)))
}

fn model_json(store: &Store, mv: &ModelVersion) -> Value {
    let mut v = serde_json::to_value(mv).expect("model versions serialize");
    v["active"] = json!(active_version(store, &mv.family).as_deref() == Some(mv.id.as_str()));
    v
}

pub(super) fn list_models(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let mut q = Query::default();
    if let Some(f) = call.query.get("family") {
        q = q.filter("family", f.as_str());
    }
    let mut versions: Vec<ModelVersion> = ctx
        .store
        .docs()
        .list_documents(MODELS, &q)
        .into_iter()
        .filter_map(|(_, v)| serde_json::from_value((*v.doc).clone()).ok())
        .collect();
    versions.sort_by(|a, b| (&a.family, a.version).cmp(&(&b.family, b.version)));
    let models: Vec<Value> = versions.iter().map(|m| model_json(&ctx.store, m)).collect();
    let active: BTreeMap<String, Value> = ctx
        .store
        .docs()
        .list_documents(FAMILIES, &Query::default())
        .into_iter()
        .map(|(f, v)| (f, v.doc["active"].clone()))
        .collect();
    Ok(ApiResponse::ok(json!({"models": models, "active": active})))
}

pub(super) fn get_model(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let id = call.param("version_id");
    let mv = load_model_version(&ctx.store, id).ok_or_else(|| ApiError::not_found(format!("model version {id} not found")))?;
    Ok(ApiResponse::ok(model_json(&ctx.store, &mv)))
}

pub(super) fn activate_model(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let id = call.param("version_id");
    let mv = load_model_version(&ctx.store, id).ok_or_else(|| ApiError::not_found(format!("model version {id} not found")))?;
    set_active(&ctx.store, &mv.family, &mv.id)?;
    Ok(ApiResponse::ok(model_json(&ctx.store, &mv)))
}
