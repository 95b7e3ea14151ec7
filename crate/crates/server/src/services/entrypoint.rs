//! Inspections, defect lists, tags, statistics and frame blobs.
//!
//! The inspection's `revision` is its document revision in the store, so
//! every accepted mutation (including locking for analysis) bumps it.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use pipescan_core::domain::{bundle_hash, validate_inspection, DefectAnnotation, Inspection};
use pipescan_core::store::{Query, StoreError};
use rand::RngCore;
use serde::Deserialize;
use serde_json::{json, Value};

use super::stats::{compute_statistics, SourceFilter};
use super::{ApiError, ApiResponse, Call, Ctx, INSPECTIONS};

/// Path segment under `/api/inspections` taken by the blob endpoints.
const RESERVED_ID: &str = "blobs";
const DEFAULT_PAGE_SIZE: usize = 20;
const MAX_PAGE_SIZE: usize = 200;

pub(super) fn load_inspection(ctx: &Ctx, id: &str) -> Result<Inspection, ApiError> {
    let v = ctx
        .store
        .docs()
        .get_document(INSPECTIONS, id)
        .ok_or_else(|| ApiError::not_found(format!("inspection {id} not found")))?;
    let mut insp: Inspection =
        serde_json::from_value((*v.doc).clone()).map_err(|e| ApiError::internal(format!("inspection {id}: {e}")))?;
    insp.revision = v.revision;
    Ok(insp)
}

/// Write `insp` if the stored revision is still `insp.revision`; on success
/// `insp.revision` is the new revision.
pub(super) fn save_inspection(ctx: &Ctx, insp: &mut Inspection) -> Result<u64, ApiError> {
    let expected = insp.revision;
    let mut doc = insp.clone();
    doc.revision = expected + 1;
    let value = serde_json::to_value(&doc).expect("inspections serialize");
    let rev = ctx.store.docs().put_document(INSPECTIONS, &insp.id, &value, Some(expected))?;
    insp.revision = rev;
    Ok(rev)
}

fn check_valid(insp: &Inspection) -> Result<(), ApiError> {
    let problems = validate_inspection(insp);
    if problems.is_empty() {
        return Ok(());
    }
    let list: Vec<String> = problems.iter().map(|v| v.to_string()).collect();
    Err(ApiError {
        extra: Some(json!({ "violations": list })),
        ..ApiError::validation(list.join("; "))
    })
}

fn check_blobs<'a>(ctx: &Ctx, ids: impl IntoIterator<Item = &'a str>) -> Result<(), ApiError> {
    let missing = ctx.store.blobs().missing(ids);
    if missing.is_empty() {
        return Ok(());
    }
    Err(ApiError {
        extra: Some(json!({ "missing": missing })),
        ..ApiError::new(400, "missing_blobs", format!("{} referenced blobs are not stored", missing.len()))
    })
}

fn unlocked(insp: &Inspection) -> Result<(), ApiError> {
    if insp.locked {
        Err(ApiError::locked(&insp.id))
    } else {
        Ok(())
    }
}

fn check_expected(insp: &Inspection, expected: Option<u64>) -> Result<(), ApiError> {
    match expected {
        Some(e) if e != insp.revision => Err(ApiError::revision_conflict(insp.revision)),
        _ => Ok(()),
    }
}

fn inspection_json(insp: &Inspection) -> Value {
    serde_json::to_value(insp).expect("inspections serialize")
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateBody {
    #[serde(default)]
    id: Option<String>,
    title: String,
    #[serde(default)]
    created_at: Option<DateTime<Utc>>,
    #[serde(default)]
    tags: Vec<String>,
}

/// Create an inspection. With a client-chosen `id`, repeating the same
/// request returns the existing inspection instead of failing.
pub(super) fn create_inspection(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let body: CreateBody = call.json()?;
    let id = match body.id {
        Some(id) => id,
        None => {
            let mut raw = [0u8; 8];
            rand::thread_rng().fill_bytes(&mut raw);
            format!("insp-{}", hex::encode(raw))
        }
    };
    if id == RESERVED_ID {
        return Err(ApiError::validation("inspection id \"blobs\" is reserved"));
    }
    let created_at = body.created_at.unwrap_or_else(|| ctx.clock.now());
    let mut insp = Inspection::new(id.clone(), body.title, created_at);
    insp.tags = body.tags;
    check_valid(&insp)?;
    if let Ok(existing) = load_inspection(ctx, &id) {
        if existing.title == insp.title && existing.created_at == insp.created_at {
            return Ok(ApiResponse::ok(inspection_json(&existing)));
        }
        return Err(ApiError::conflict(format!("inspection {id} already exists with different metadata")));
    }
    match save_inspection(ctx, &mut insp) {
        Ok(_) => Ok(ApiResponse::json(201, &inspection_json(&insp))),
        Err(e) if e.code == "revision_conflict" => Err(ApiError::conflict(format!("inspection {id} was created concurrently"))),
        Err(e) => Err(e),
    }
}

pub(super) fn list_inspections(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let page: usize = call.query_parse("page")?.unwrap_or(1);
    let page_size: usize = call.query_parse("page_size")?.unwrap_or(DEFAULT_PAGE_SIZE);
    if page == 0 {
        return Err(ApiError::bad_request("page starts at 1"));
    }
    if page_size == 0 || page_size > MAX_PAGE_SIZE {
        return Err(ApiError::bad_request(format!("page_size must be in 1..={MAX_PAGE_SIZE}")));
    }
    let mut all = all_inspections(ctx)?;
    // Newest first; equal timestamps fall back to id order.
    all.sort_by(|a, b| b.created_at.cmp(&a.created_at).then_with(|| a.id.cmp(&b.id)));
    let total = all.len();
    let items: Vec<Value> = all
        .iter()
        .skip((page - 1) * page_size)
        .take(page_size)
        .map(|i| {
            json!({
                "id": i.id,
                "title": i.title,
                "created_at": i.created_at,
                "locked": i.locked,
                "tags": i.tags,
                "frame_count": i.frame_refs.len(),
                "annotation_count": i.annotations.len(),
                "revision": i.revision,
            })
        })
        .collect();
    Ok(ApiResponse::ok(json!({"items": items, "page": page, "page_size": page_size, "total": total})))
}

pub(super) fn get_inspection(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let insp = load_inspection(ctx, call.param("id"))?;
    Ok(ApiResponse::ok(inspection_json(&insp)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FramesBody {
    frame_refs: Vec<String>,
    #[serde(default)]
    depth_ref: Option<String>,
    #[serde(default)]
    expected_revision: Option<u64>,
}

/// Attach uploaded frame blobs. Every blob must already be stored.
pub(super) fn set_frames(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let body: FramesBody = call.json()?;
    let mut insp = load_inspection(ctx, call.param("id"))?;
    if insp.frame_refs == body.frame_refs && insp.depth_ref == body.depth_ref {
        return Ok(ApiResponse::ok(json!({"revision": insp.revision})));
    }
    unlocked(&insp)?;
    check_expected(&insp, body.expected_revision)?;
    check_blobs(ctx, body.frame_refs.iter().map(String::as_str).chain(body.depth_ref.as_deref()))?;
    insp.frame_refs = body.frame_refs;
    insp.depth_ref = body.depth_ref;
    check_valid(&insp)?;
    let rev = save_inspection(ctx, &mut insp)?;
    Ok(ApiResponse::ok(json!({ "revision": rev })))
}

pub(super) fn get_bundle(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let insp = load_inspection(ctx, call.param("id"))?;
    let bundle = insp.bundle();
    let hash = bundle_hash(&bundle);
    Ok(ApiResponse::ok(json!({
        "revision": insp.revision,
        "locked": insp.locked,
        "bundle": bundle,
        "bundle_hash": hash,
    })))
}

pub(super) fn get_defects(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let insp = load_inspection(ctx, call.param("id"))?;
    Ok(ApiResponse::ok(json!({"revision": insp.revision, "annotations": insp.annotations})))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DefectsBody {
    annotations: Vec<DefectAnnotation>,
    #[serde(default)]
    expected_revision: Option<u64>,
}

/// Replace the whole defect list. An identical list is accepted as a no-op
/// whatever the expected revision, so retried uploads converge.
pub(super) fn put_defects(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let body: DefectsBody = call.json()?;
    let mut insp = load_inspection(ctx, call.param("id"))?;
    if insp.annotations == body.annotations {
        return Ok(ApiResponse::ok(json!({"revision": insp.revision, "changed": false})));
    }
    unlocked(&insp)?;
    check_expected(&insp, body.expected_revision)?;
    check_blobs(ctx, body.annotations.iter().filter_map(|a| a.screenshot_ref.as_deref()))?;
    insp.annotations = body.annotations;
    check_valid(&insp)?;
    let rev = save_inspection(ctx, &mut insp)?;
    Ok(ApiResponse::ok(json!({"revision": rev, "changed": true})))
}

pub(super) fn delete_defect(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let index: usize = call
        .param("index")
        .parse()
        .map_err(|_| ApiError::bad_request("defect index must be a non-negative integer"))?;
    let expected: Option<u64> = call.query_parse("expected_revision")?;
    let mut insp = load_inspection(ctx, call.param("id"))?;
    unlocked(&insp)?;
    check_expected(&insp, expected)?;
    if index >= insp.annotations.len() {
        return Err(ApiError::not_found(format!(
            "defect {index} not found; inspection has {}",
            insp.annotations.len()
        )));
    }
    insp.annotations.remove(index);
    let rev = save_inspection(ctx, &mut insp)?;
    Ok(ApiResponse::ok(json!({"revision": rev, "annotations": insp.annotations})))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TagsBody {
    tags: Vec<String>,
    #[serde(default)]
    expected_revision: Option<u64>,
}

pub(super) fn put_tags(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let body: TagsBody = call.json()?;
    let mut insp = load_inspection(ctx, call.param("id"))?;
    if insp.tags == body.tags {
        return Ok(ApiResponse::ok(json!({"revision": insp.revision, "tags": insp.tags})));
    }
    unlocked(&insp)?;
    check_expected(&insp, body.expected_revision)?;
    insp.tags = body.tags;
    check_valid(&insp)?;
    let rev = save_inspection(ctx, &mut insp)?;
    Ok(ApiResponse::ok(json!({"revision": rev, "tags": insp.tags})))
}

pub(super) fn list_tags(ctx: &Ctx, _call: &Call) -> Result<ApiResponse, ApiError> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for (_, v) in ctx.store.docs().list_documents(INSPECTIONS, &Query::default()) {
        for t in v.doc["tags"].as_array().into_iter().flatten().filter_map(Value::as_str) {
            *counts.entry(t.to_string()).or_default() += 1;
        }
    }
    let tags: Vec<Value> = counts.into_iter().map(|(tag, count)| json!({"tag": tag, "count": count})).collect();
    Ok(ApiResponse::ok(json!({ "tags": tags })))
}

pub(super) fn all_inspections(ctx: &Ctx) -> Result<Vec<Inspection>, ApiError> {
    ctx.store
        .docs()
        .list_documents(INSPECTIONS, &Query::default())
        .into_iter()
        .map(|(id, v)| {
            let mut insp = serde_json::from_value::<Inspection>((*v.doc).clone())
                .map_err(|e| ApiError::internal(format!("inspection {id}: {e}")))?;
            insp.revision = v.revision;
            Ok(insp)
        })
        .collect()
}

pub(super) fn statistics(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let window: u32 = call.query_parse("window_days")?.unwrap_or(90);
    if window == 0 || window > 3660 {
        return Err(ApiError::bad_request("window_days must be in 1..=3660"));
    }
    let source = match call.query.get("source") {
        None => SourceFilter::All,
        Some(s) => SourceFilter::parse(s).ok_or_else(|| ApiError::bad_request("source must be all, manual or automatic"))?,
    };
    let result = compute_statistics(&all_inspections(ctx)?, ctx.clock.now(), window, source);
    Ok(ApiResponse::ok(serde_json::to_value(result).expect("statistics serialize")))
}

pub(super) fn put_blob(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let id = call.param("blob_id");
    let existed = ctx.store.blobs().has_blob(id);
    ctx.store.blobs().put_blob_with_id(id, call.body).map_err(|e| match e {
        StoreError::Invalid(m) => ApiError::new(400, "hash_mismatch", m),
        other => other.into(),
    })?;
    Ok(ApiResponse::json(if existed { 200 } else { 201 }, &json!({"id": id, "size": call.body.len()})))
}

pub(super) fn get_blob(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let bytes = ctx.store.blobs().get_blob(call.param("blob_id"))?;
    Ok(ApiResponse::bytes("application/octet-stream", bytes))
}

#[derive(Deserialize)]
struct MissingBody {
    ids: Vec<String>,
}

pub(super) fn missing_blobs(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let body: MissingBody = call.json()?;
    let missing = ctx.store.blobs().missing(body.ids.iter().map(String::as_str));
    Ok(ApiResponse::ok(json!({ "missing": missing })))
}
