//! Users and bearer tokens.
//!
//! Tokens are 32 random bytes, hex-encoded. The server keeps a record per
//! token keyed by the SHA-256 of the token, so the data directory never
//! holds a usable credential.

use chrono::{DateTime, Utc};
use pipescan_core::store::{blob_id, Role, StoreError};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ApiError, ApiResponse, Call, Ctx};

pub const TOKENS: &str = "tokens";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TokenRecord {
    username: String,
    issued_at: DateTime<Utc>,
    expires_at: DateTime<Utc>,
}

/// The authenticated caller.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Principal {
    pub username: String,
    pub role: Role,
    pub token_key: String,
}

fn token_key(token: &str) -> String {
    blob_id(token.as_bytes())
}

pub(super) fn authorize(ctx: &Ctx, token: Option<&str>, required: Role) -> Result<Principal, ApiError> {
    let token = token.filter(|t| !t.is_empty()).ok_or_else(|| ApiError::unauthorized("missing bearer token"))?;
    let key = token_key(token);
    let rec = ctx
        .store
        .docs()
        .get_document(TOKENS, &key)
        .and_then(|v| serde_json::from_value::<TokenRecord>((*v.doc).clone()).ok())
        .ok_or_else(|| ApiError::unauthorized("unknown or revoked token"))?;
    if ctx.clock.now() >= rec.expires_at {
        return Err(ApiError::unauthorized("token expired"));
    }
    // Role comes from the live user record so role changes apply at once.
    let user = ctx
        .store
        .users()
        .get_user(&rec.username)
        .ok_or_else(|| ApiError::unauthorized("user no longer exists"))?;
    if !user.role.satisfies(required) {
        return Err(ApiError::forbidden(format!("{required} role required")));
    }
    Ok(Principal {
        username: user.username,
        role: user.role,
        token_key: key,
    })
}

#[derive(Deserialize)]
struct LoginBody {
    username: String,
    password: String,
}

pub(super) fn login(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let body: LoginBody = call.json()?;
    let user = ctx
        .store
        .users()
        .authenticate(&body.username, &body.password)
        .ok_or_else(|| ApiError::unauthorized("bad username or password"))?;
    let mut raw = [0u8; 32];
    rand::thread_rng().fill_bytes(&mut raw);
    let token = hex::encode(raw);
    let now = ctx.clock.now();
    let rec = TokenRecord {
        username: user.username.clone(),
        issued_at: now,
        expires_at: now + ctx.config.token_lifetime,
    };
    let doc = serde_json::to_value(&rec).expect("token records serialize");
    ctx.store.docs().put_document(TOKENS, &token_key(&token), &doc, Some(0))?;
    Ok(ApiResponse::ok(json!({
        "token": token,
        "username": user.username,
        "role": user.role,
        "issued_at": rec.issued_at,
        "expires_at": rec.expires_at,
    })))
}

pub(super) fn logout(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    ctx.store.docs().delete_document(TOKENS, &call.principal().token_key, None)?;
    Ok(ApiResponse::ok(json!({"logged_out": true})))
}

pub(super) fn me(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let p = call.principal();
    let expires_at = ctx
        .store
        .docs()
        .get_document(TOKENS, &p.token_key)
        .map(|v| v.doc["expires_at"].clone())
        .unwrap_or(Value::Null);
    Ok(ApiResponse::ok(json!({"username": p.username, "role": p.role, "expires_at": expires_at})))
}

pub(super) fn list_users(ctx: &Ctx, _call: &Call) -> Result<ApiResponse, ApiError> {
    let users: Vec<Value> = ctx
        .store
        .users()
        .list_users()
        .into_iter()
        .map(|u| json!({"username": u.username, "role": u.role}))
        .collect();
    Ok(ApiResponse::ok(json!({ "users": users })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct UserBody {
    username: String,
    password: String,
    role: Role,
}

/// Create a user or replace an existing user's password and role.
pub(super) fn upsert_user(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let body: UserBody = call.json()?;
    let existed = ctx.store.users().get_user(&body.username).is_some();
    let rec = ctx
        .store
        .users()
        .upsert_user(&body.username, &body.password, body.role)
        .map_err(|e| match e {
            StoreError::InvalidId(_) | StoreError::Invalid(_) => ApiError::validation(e.to_string()),
            other => other.into(),
        })?;
    Ok(ApiResponse::json(
        if existed { 200 } else { 201 },
        &json!({"username": rec.username, "role": rec.role}),
    ))
}

#[derive(Deserialize)]
struct RoleBody {
    role: Role,
}

pub(super) fn set_role(ctx: &Ctx, call: &Call) -> Result<ApiResponse, ApiError> {
    let body: RoleBody = call.json()?;
    let rec = ctx.store.users().set_role(call.param("username"), body.role)?;
    Ok(ApiResponse::ok(json!({"username": rec.username, "role": rec.role})))
}
