//! The REST API as plain functions over [`ApiRequest`] / [`ApiResponse`].
//!
//! Three services share one process: `auth` (users and tokens),
//! `entrypoint` (inspections, defects, tags, statistics, blobs) and `ml`
//! (analysis, jobs, datasets, models). The HTTP layer only translates.

mod auth;
mod entrypoint;
mod ml;
pub mod stats;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use chrono::Duration;
use pipescan_core::store::{Role, Store, StoreError};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use crate::clock::Clock;
use crate::jobs::{JobError, JobQueue};

pub use auth::{Principal, TOKENS};
pub use ml::{MlHandler, ModelVersion, FAMILIES, MODELS};

pub const INSPECTIONS: &str = "inspections";
pub const DATASETS: &str = "datasets";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Service {
    Auth,
    Entrypoint,
    Ml,
    WebUi,
}

impl Service {
    pub fn name(self) -> &'static str {
        match self {
            Service::Auth => "auth",
            Service::Entrypoint => "entrypoint",
            Service::Ml => "ml-service",
            Service::WebUi => "webui",
        }
    }
}

/// Prefix table of the gateway, matched on whole path segments.
pub const ROUTES: &[(&str, Service)] = &[
    ("/api/auth", Service::Auth),
    ("/api/inspections", Service::Entrypoint),
    ("/api/defects", Service::Entrypoint),
    ("/api/statistics", Service::Entrypoint),
    ("/api/tags", Service::Entrypoint),
    ("/api/ml", Service::Ml),
    ("/", Service::WebUi),
];

fn prefix_matches(prefix: &str, path: &str) -> bool {
    prefix == "/" || path == prefix || path.strip_prefix(prefix).is_some_and(|rest| rest.starts_with('/'))
}

/// The service owning `path`, by longest matching prefix. Unknown paths
/// under `/api` belong to nobody.
pub fn route(path: &str) -> Option<Service> {
    let (_, service) = ROUTES
        .iter()
        .filter(|(p, _)| prefix_matches(p, path))
        .max_by_key(|(p, _)| p.len())?;
    if *service == Service::WebUi && prefix_matches("/api", path) {
        return None;
    }
    Some(*service)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Public,
    Operator,
    Admin,
}

type Handler = fn(&Ctx, &Call) -> Result<ApiResponse, ApiError>;

pub struct Endpoint {
    pub method: &'static str,
    pub pattern: &'static str,
    pub service: Service,
    pub access: Access,
    pub mutating: bool,
    handler: Handler,
}

macro_rules! ep {
    ($m:literal, $p:literal, $s:ident, $a:ident, $mu:literal, $h:path) => {
        Endpoint {
            method: $m,
            pattern: $p,
            service: Service::$s,
            access: Access::$a,
            mutating: $mu,
            handler: $h,
        }
    };
}

/// Every endpoint. Literal segments win over `{params}` when both match.
pub static ENDPOINTS: &[Endpoint] = &[
    ep!("POST", "/api/auth/login", Auth, Public, true, auth::login),
    ep!("POST", "/api/auth/logout", Auth, Operator, true, auth::logout),
    ep!("GET", "/api/auth/me", Auth, Operator, false, auth::me),
    ep!("GET", "/api/auth/users", Auth, Admin, false, auth::list_users),
    ep!("POST", "/api/auth/users", Auth, Admin, true, auth::upsert_user),
    ep!("PUT", "/api/auth/users/{username}/role", Auth, Admin, true, auth::set_role),
    ep!("POST", "/api/inspections", Entrypoint, Operator, true, entrypoint::create_inspection),
    ep!("GET", "/api/inspections", Entrypoint, Operator, false, entrypoint::list_inspections),
    ep!("PUT", "/api/inspections/blobs/{blob_id}", Entrypoint, Operator, true, entrypoint::put_blob),
    ep!("GET", "/api/inspections/blobs/{blob_id}", Entrypoint, Operator, false, entrypoint::get_blob),
    ep!("POST", "/api/inspections/blobs/missing", Entrypoint, Operator, false, entrypoint::missing_blobs),
    ep!("GET", "/api/inspections/{id}", Entrypoint, Operator, false, entrypoint::get_inspection),
    ep!("POST", "/api/inspections/{id}/frames", Entrypoint, Operator, true, entrypoint::set_frames),
    ep!("GET", "/api/inspections/{id}/bundle", Entrypoint, Operator, false, entrypoint::get_bundle),
    ep!("GET", "/api/defects/{id}", Entrypoint, Operator, false, entrypoint::get_defects),
    ep!("PUT", "/api/defects/{id}", Entrypoint, Operator, true, entrypoint::put_defects),
    ep!("DELETE", "/api/defects/{id}/{index}", Entrypoint, Operator, true, entrypoint::delete_defect),
    ep!("GET", "/api/tags", Entrypoint, Operator, false, entrypoint::list_tags),
    ep!("PUT", "/api/tags/{id}", Entrypoint, Operator, true, entrypoint::put_tags),
    ep!("GET", "/api/statistics", Entrypoint, Operator, false, entrypoint::statistics),
    ep!("POST", "/api/ml/analysis", Ml, Operator, true, ml::start_analysis),
    ep!("GET", "/api/ml/jobs", Ml, Operator, false, ml::list_jobs),
    ep!("GET", "/api/ml/jobs/{job_id}", Ml, Operator, false, ml::get_job),
    ep!("POST", "/api/ml/jobs/{job_id}/cancel", Ml, Admin, true, ml::cancel_job),
    ep!("GET", "/api/ml/datasets", Ml, Operator, false, ml::list_datasets),
    ep!("POST", "/api/ml/datasets", Ml, Operator, true, ml::create_dataset),
    ep!("GET", "/api/ml/datasets/{dataset_id}", Ml, Operator, false, ml::get_dataset),
    ep!("POST", "/api/ml/datasets/{dataset_id}/images", Ml, Operator, true, ml::add_image),
    ep!("POST", "/api/ml/datasets/{dataset_id}/augment", Ml, Operator, true, ml::augment_dataset),
    ep!("POST", "/api/ml/datasets/{dataset_id}/split", Ml, Operator, true, ml::split),
    ep!("POST", "/api/ml/datasets/{dataset_id}/retrain", Ml, Admin, true, ml::start_retrain),
    ep!("GET", "/api/ml/models", Ml, Operator, false, ml::list_models),
    ep!("GET", "/api/ml/models/{version_id}", Ml, Operator, false, ml::get_model),
    ep!("POST", "/api/ml/models/{version_id}/activate", Ml, Admin, true, ml::activate_model),
];

/// Match `path` against `pattern`, returning the `{param}` captures and the
/// number of literal segments.
fn match_pattern(pattern: &str, path: &str) -> Option<(BTreeMap<String, String>, usize)> {
    let pat: Vec<&str> = pattern.trim_matches('/').split('/').collect();
    let segs: Vec<&str> = path.trim_end_matches('/').trim_start_matches('/').split('/').collect();
    if pat.len() != segs.len() {
        return None;
    }
    let mut params = BTreeMap::new();
    let mut literals = 0;
    for (p, s) in pat.iter().zip(&segs) {
        if let Some(name) = p.strip_prefix('{').and_then(|p| p.strip_suffix('}')) {
            if s.is_empty() {
                return None;
            }
            params.insert(name.to_string(), percent_decode(s));
        } else if p == s {
            literals += 1;
        } else {
            return None;
        }
    }
    Some((params, literals))
}

fn percent_decode(s: &str) -> String {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' && i + 2 < bytes.len() {
            let hex = std::str::from_utf8(&bytes[i + 1..i + 3]).ok();
            if let Some(b) = hex.and_then(|h| u8::from_str_radix(h, 16).ok()) {
                out.push(b);
                i += 3;
                continue;
            }
        }
        out.push(bytes[i]);
        i += 1;
    }
    String::from_utf8_lossy(&out).into_owned()
}

#[derive(Debug, Clone, Default)]
pub struct ApiRequest {
    pub method: String,
    pub path: String,
    pub query: BTreeMap<String, String>,
    pub token: Option<String>,
    pub body: Vec<u8>,
}

impl ApiRequest {
    pub fn new(method: &str, path: &str) -> Self {
        Self {
            method: method.to_string(),
            path: path.to_string(),
            ..Self::default()
        }
    }

    pub fn token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(token.into());
        self
    }

    pub fn json(mut self, body: &Value) -> Self {
        self.body = serde_json::to_vec(body).expect("JSON values serialize");
        self
    }

    pub fn bytes(mut self, body: Vec<u8>) -> Self {
        self.body = body;
        self
    }

    pub fn query(mut self, key: &str, value: impl ToString) -> Self {
        self.query.insert(key.to_string(), value.to_string());
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiResponse {
    pub status: u16,
    pub content_type: &'static str,
    pub body: Vec<u8>,
}

impl ApiResponse {
    /// JSON body in canonical form (sorted keys), so equal content gives
    /// equal bytes.
    pub fn json(status: u16, value: &Value) -> Self {
        Self {
            status,
            content_type: "application/json",
            body: pipescan_core::domain::to_canonical_vec(value).expect("JSON values serialize"),
        }
    }

    pub fn ok(value: Value) -> Self {
        Self::json(200, &value)
    }

    pub fn bytes(content_type: &'static str, body: Vec<u8>) -> Self {
        Self {
            status: 200,
            content_type,
            body,
        }
    }

    pub fn json_body(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or(Value::Null)
    }
}

/// An error response: `{code, message}` plus optional extra fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: u16,
    pub code: &'static str,
    pub message: String,
    pub extra: Option<Value>,
}

impl ApiError {
    pub fn new(status: u16, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            extra: None,
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(400, "bad_request", message)
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(400, "validation_failed", message)
    }

    pub fn unauthorized(message: impl Into<String>) -> Self {
        Self::new(401, "unauthorized", message)
    }

    pub fn forbidden(message: impl Into<String>) -> Self {
        Self::new(403, "forbidden", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(404, "not_found", message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(409, "conflict", message)
    }

    pub fn locked(id: &str) -> Self {
        Self::new(409, "locked", format!("inspection {id} is locked by an analysis job"))
    }

    pub fn revision_conflict(current: u64) -> Self {
        Self {
            extra: Some(json!({ "current_revision": current })),
            ..Self::new(409, "revision_conflict", format!("stale revision; current revision is {current}"))
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(500, "internal", message)
    }

    pub fn into_response(self) -> ApiResponse {
        let mut body = json!({"code": self.code, "message": self.message});
        if let Some(Value::Object(extra)) = self.extra {
            for (k, v) in extra {
                body[k] = v;
            }
        }
        ApiResponse::json(self.status, &body)
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Conflict { current } => ApiError::revision_conflict(current),
            StoreError::NotFound { .. } => ApiError::not_found(e.to_string()),
            StoreError::InvalidId(_) | StoreError::Invalid(_) => ApiError::bad_request(e.to_string()),
            StoreError::Corruption { .. } => ApiError::new(500, "corruption", e.to_string()),
            _ => ApiError::internal(e.to_string()),
        }
    }
}

impl From<JobError> for ApiError {
    fn from(e: JobError) -> Self {
        match e {
            JobError::NotFound(_) => ApiError::not_found(e.to_string()),
            JobError::Conflict { .. } => ApiError::conflict(e.to_string()),
            JobError::InvalidPayload(_) => ApiError::validation(e.to_string()),
            JobError::Io { .. } => ApiError::internal(e.to_string()),
        }
    }
}

/// What a handler sees.
pub struct Call<'a> {
    pub params: BTreeMap<String, String>,
    pub query: &'a BTreeMap<String, String>,
    pub body: &'a [u8],
    pub principal: Option<Principal>,
}

impl Call<'_> {
    pub fn param(&self, name: &str) -> &str {
        self.params.get(name).map(String::as_str).unwrap_or("")
    }

    pub fn json<T: DeserializeOwned>(&self) -> Result<T, ApiError> {
        serde_json::from_slice(self.body).map_err(|e| ApiError::bad_request(format!("request body: {e}")))
    }

    pub fn query_parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, ApiError> {
        match self.query.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| ApiError::bad_request(format!("query parameter {key}: bad value {raw:?}"))),
        }
    }

    pub fn principal(&self) -> &Principal {
        self.principal.as_ref().expect("authorized endpoints carry a principal")
    }
}

#[derive(Debug, Clone)]
pub struct ApiConfig {
    pub token_lifetime: Duration,
    /// Built web assets served for non-API paths.
    pub static_dir: Option<PathBuf>,
}

impl Default for ApiConfig {
    fn default() -> Self {
        Self {
            token_lifetime: Duration::hours(8),
            static_dir: None,
        }
    }
}

/// Shared state of all services.
pub struct Ctx {
    pub store: Arc<Store>,
    pub clock: Arc<dyn Clock>,
    pub queue: Arc<JobQueue>,
    pub config: ApiConfig,
}

#[derive(Clone)]
pub struct Api {
    ctx: Arc<Ctx>,
}

impl Api {
    /// Build the API over a store, opening the ML job queue under
    /// `<store root>/queues/ml.log` and reconciling inspection locks.
    pub fn open(store: Arc<Store>, clock: Arc<dyn Clock>, config: ApiConfig) -> Result<Self, ApiError> {
        let handler = Arc::new(MlHandler::new(store.clone(), clock.clone()));
        let queue = JobQueue::open("ml", store.root().join("queues").join("ml.log"), clock.clone(), handler)?;
        let api = Self {
            ctx: Arc::new(Ctx {
                store,
                clock,
                queue: Arc::new(queue),
                config,
            }),
        };
        ml::reconcile_locks(&api.ctx)?;
        Ok(api)
    }

    pub fn queue(&self) -> Arc<JobQueue> {
        self.ctx.queue.clone()
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.ctx.store
    }

    pub fn ctx(&self) -> &Ctx {
        &self.ctx
    }

    /// Resolve the token to its principal if it authorizes `required`.
    pub fn authorize(&self, token: Option<&str>, required: Role) -> Result<Principal, ApiError> {
        auth::authorize(&self.ctx, token, required)
    }

    pub fn handle(&self, req: &ApiRequest) -> ApiResponse {
        match self.dispatch(req) {
            Ok(r) => r,
            Err(e) => e.into_response(),
        }
    }

    fn dispatch(&self, req: &ApiRequest) -> Result<ApiResponse, ApiError> {
        let path = req.path.split('?').next().unwrap_or("");
        let service = route(path).ok_or_else(|| ApiError::not_found(format!("no route for {path}")))?;
        if service == Service::WebUi {
            return self.static_asset(&req.method, path);
        }
        let mut best: Option<(&Endpoint, BTreeMap<String, String>, usize)> = None;
        let mut path_known = false;
        for ep in ENDPOINTS.iter().filter(|e| e.service == service) {
            let Some((params, literals)) = match_pattern(ep.pattern, path) else { continue };
            path_known = true;
            if !ep.method.eq_ignore_ascii_case(&req.method) {
                continue;
            }
            if best.as_ref().is_none_or(|(_, _, l)| literals > *l) {
                best = Some((ep, params, literals));
            }
        }
        let Some((ep, params, _)) = best else {
            return Err(if path_known {
                ApiError::new(405, "method_not_allowed", format!("{} not allowed on {path}", req.method))
            } else {
                ApiError::not_found(format!("no endpoint {path}"))
            });
        };
        let principal = match ep.access {
            Access::Public => None,
            Access::Operator => Some(self.authorize(req.token.as_deref(), Role::Operator)?),
            Access::Admin => Some(self.authorize(req.token.as_deref(), Role::Admin)?),
        };
        let call = Call {
            params,
            query: &req.query,
            body: &req.body,
            principal,
        };
        (ep.handler)(&self.ctx, &call)
    }

    fn static_asset(&self, method: &str, path: &str) -> Result<ApiResponse, ApiError> {
        if !method.eq_ignore_ascii_case("GET") {
            return Err(ApiError::new(405, "method_not_allowed", "static assets are read-only"));
        }
        let dir = self
            .ctx
            .config
            .static_dir
            .as_ref()
            .ok_or_else(|| ApiError::not_found("no web assets configured"))?;
        let rel = path.trim_start_matches('/');
        let rel = if rel.is_empty() { "index.html" } else { rel };
        if rel.split('/').any(|s| s == ".." || s.starts_with('.')) {
            return Err(ApiError::not_found(path.to_string()));
        }
        let file = dir.join(rel);
        let bytes = std::fs::read(&file).map_err(|_| ApiError::not_found(path.to_string()))?;
        let ct = match file.extension().and_then(|e| e.to_str()) {
            Some("html") => "text/html; charset=utf-8",
            Some("js") => "text/javascript",
            Some("css") => "text/css",
            Some("json") => "application/json",
            Some("svg") => "image/svg+xml",
            _ => "application/octet-stream",
        };
        Ok(ApiResponse::bytes(ct, bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gateway_routes() {
        assert_eq!(route("/api/auth/login"), Some(Service::Auth));
        assert_eq!(route("/api/ml/jobs/7"), Some(Service::Ml));
        assert_eq!(route("/api/defects/x/0"), Some(Service::Entrypoint));
        assert_eq!(route("/api/statistics"), Some(Service::Entrypoint));
        assert_eq!(route("/index.html"), Some(Service::WebUi));
        assert_eq!(route("/"), Some(Service::WebUi));
        assert_eq!(route("/api/unknown"), None);
        assert_eq!(route("/api"), None);
        assert_eq!(route("/api/mlx"), None);
        assert_eq!(route("/api/authz/login"), None);
    }

    #[test]
    fn every_endpoint_routes_to_its_service() {
        for ep in ENDPOINTS {
            let concrete = ep.pattern.replace("{", "x").replace("}", "");
            assert_eq!(route(&concrete), Some(ep.service), "{}", ep.pattern);
        }
    }

    #[test]
    fn literal_segments_win() {
        let (_, lit_blob) = match_pattern("/api/inspections/blobs/missing", "/api/inspections/blobs/missing").unwrap();
        let (p, lit_frames) = match_pattern("/api/inspections/{id}/frames", "/api/inspections/abc/frames").unwrap();
        assert!(lit_blob > lit_frames);
        assert_eq!(p["id"], "abc");
        assert!(match_pattern("/api/inspections/{id}", "/api/inspections/").is_none());
    }

    #[test]
    fn decodes_params() {
        assert_eq!(percent_decode("a%20b"), "a b");
        assert_eq!(percent_decode("100%"), "100%");
        assert_eq!(percent_decode("%zz"), "%zz");
    }

    #[test]
    fn api_reference_lists_every_endpoint_with_its_access() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/API.md");
        let doc = std::fs::read_to_string(path).unwrap();
        let mut documented = Vec::new();
        let mut lines = doc.lines();
        while let Some(line) = lines.next() {
            let Some(head) = line.strip_prefix("### ") else { continue };
            let access = lines.find(|l| !l.trim().is_empty()).unwrap_or("");
            let access = access.split('.').next().unwrap_or("").to_string();
            documented.push((head.to_string(), access));
        }
        let expected: Vec<(String, String)> = ENDPOINTS
            .iter()
            .map(|e| (format!("{} {}", e.method, e.pattern), format!("{:?}", e.access)))
            .collect();
        assert_eq!(documented, expected);
    }
}
