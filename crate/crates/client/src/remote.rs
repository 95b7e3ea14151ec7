//! Typed calls to the REST API.

use std::sync::Arc;

use pipescan_core::domain::{DefectAnnotation, Inspection};
use pipescan_core::store::blob_id;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::transport::{Request, Transport};
use crate::{ClientError, Result};

/// A downloaded bundle, with the exact bytes the server sent.
#[derive(Debug, Clone)]
pub struct BundleResponse {
    pub raw: Vec<u8>,
    pub revision: u64,
    pub locked: bool,
    pub bundle: Value,
    pub bundle_hash: String,
}

#[derive(Deserialize)]
struct BundleBody {
    revision: u64,
    locked: bool,
    bundle: Value,
    bundle_hash: String,
}

#[derive(Clone)]
pub struct Remote {
    transport: Arc<dyn Transport>,
    token: Option<String>,
}

impl Remote {
    pub fn new(transport: Arc<dyn Transport>, token: Option<String>) -> Self {
        Self { transport, token }
    }

    pub fn with_token(&self, token: impl Into<String>) -> Self {
        Self {
            transport: self.transport.clone(),
            token: Some(token.into()),
        }
    }

    fn send(&self, mut req: Request) -> Result<Vec<u8>> {
        req.token = self.token.clone();
        let resp = self.transport.send(&req).map_err(|e| ClientError::Network(e.0))?;
        if resp.status < 400 {
            return Ok(resp.body);
        }
        let body: Value = serde_json::from_slice(&resp.body).unwrap_or(Value::Null);
        let code = body["code"].as_str().unwrap_or("unknown").to_string();
        let message = body["message"].as_str().unwrap_or("").to_string();
        if resp.status == 401 || resp.status == 403 {
            return Err(ClientError::Auth(format!("{} {message}", resp.status)));
        }
        Err(ClientError::Api {
            status: resp.status,
            code,
            message,
            body,
        })
    }

    fn json<T: DeserializeOwned>(&self, method: &str, path: &str, body: Option<&Value>) -> Result<T> {
        let req = Request {
            method: method.into(),
            path: path.into(),
            body: body.map(|b| serde_json::to_vec(b).expect("JSON values serialize")).unwrap_or_default(),
            content_type: body.map(|_| "application/json"),
            ..Request::default()
        };
        let bytes = self.send(req)?;
        serde_json::from_slice(&bytes).map_err(|e| ClientError::Network(format!("{method} {path}: bad response: {e}")))
    }

    pub fn login(&self, username: &str, password: &str) -> Result<String> {
        let v: Value = self.json("POST", "/api/auth/login", Some(&json!({"username": username, "password": password})))?;
        v["token"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ClientError::Network("login response without token".into()))
    }

    pub fn me(&self) -> Result<Value> {
        self.json("GET", "/api/auth/me", None)
    }

    pub fn missing_blobs(&self, ids: &[String]) -> Result<Vec<String>> {
        let v: Value = self.json("POST", "/api/inspections/blobs/missing", Some(&json!({ "ids": ids })))?;
        serde_json::from_value(v["missing"].clone()).map_err(|e| ClientError::Network(e.to_string()))
    }

    pub fn put_blob(&self, bytes: &[u8]) -> Result<String> {
        let id = blob_id(bytes);
        self.send(Request {
            method: "PUT".into(),
            path: format!("/api/inspections/blobs/{id}"),
            body: bytes.to_vec(),
            content_type: Some("application/octet-stream"),
            ..Request::default()
        })?;
        Ok(id)
    }

    /// Fetch a blob and check it hashes to its id.
    pub fn get_blob(&self, id: &str) -> Result<Vec<u8>> {
        let bytes = self.send(Request {
            method: "GET".into(),
            path: format!("/api/inspections/blobs/{id}"),
            ..Request::default()
        })?;
        if blob_id(&bytes) != id {
            return Err(ClientError::Network(format!("blob {id} arrived corrupted")));
        }
        Ok(bytes)
    }

    /// Create the inspection's metadata; an identical existing one is fine.
    pub fn create_inspection(&self, insp: &Inspection) -> Result<Value> {
        self.json(
            "POST",
            "/api/inspections",
            Some(&json!({"id": insp.id, "title": insp.title, "created_at": insp.created_at, "tags": insp.tags})),
        )
    }

    pub fn set_frames(&self, id: &str, frame_refs: &[String], depth_ref: Option<&str>, expected: Option<u64>) -> Result<u64> {
        let v: Value = self.json(
            "POST",
            &format!("/api/inspections/{id}/frames"),
            Some(&json!({"frame_refs": frame_refs, "depth_ref": depth_ref, "expected_revision": expected})),
        )?;
        Ok(v["revision"].as_u64().unwrap_or_default())
    }

    pub fn put_defects(&self, id: &str, annotations: &[DefectAnnotation], expected: Option<u64>) -> Result<u64> {
        let v: Value = self.json(
            "PUT",
            &format!("/api/defects/{id}"),
            Some(&json!({"annotations": annotations, "expected_revision": expected})),
        )?;
        Ok(v["revision"].as_u64().unwrap_or_default())
    }

    pub fn put_tags(&self, id: &str, tags: &[String], expected: Option<u64>) -> Result<u64> {
        let v: Value = self.json("PUT", &format!("/api/tags/{id}"), Some(&json!({"tags": tags, "expected_revision": expected})))?;
        Ok(v["revision"].as_u64().unwrap_or_default())
    }

    pub fn bundle(&self, id: &str) -> Result<BundleResponse> {
        let raw = self.send(Request {
            method: "GET".into(),
            path: format!("/api/inspections/{id}/bundle"),
            ..Request::default()
        })?;
        let b: BundleBody = serde_json::from_slice(&raw).map_err(|e| ClientError::Network(format!("bundle {id}: {e}")))?;
        Ok(BundleResponse {
            raw,
            revision: b.revision,
            locked: b.locked,
            bundle: b.bundle,
            bundle_hash: b.bundle_hash,
        })
    }
}
