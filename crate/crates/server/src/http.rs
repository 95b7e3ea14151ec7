//! HTTP gateway: every request is handed to [`Api::handle`] on a blocking
//! thread, since handlers touch the file store directly.

use std::collections::BTreeMap;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::{header, HeaderMap, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;

use crate::services::{Api, ApiError, ApiRequest, ApiResponse};

pub const MAX_BODY_BYTES: usize = 512 * 1024 * 1024;

pub fn router(api: Api) -> Router {
    Router::new()
        .fallback(gateway)
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(api)
}

fn bearer(headers: &HeaderMap) -> Option<String> {
    let v = headers.get(header::AUTHORIZATION)?.to_str().ok()?;
    let (scheme, token) = v.split_once(' ')?;
    scheme.eq_ignore_ascii_case("bearer").then(|| token.trim().to_string())
}

fn to_http(r: ApiResponse) -> Response {
    let status = StatusCode::from_u16(r.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, [(header::CONTENT_TYPE, r.content_type)], r.body).into_response()
}

async fn gateway(
    State(api): State<Api>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
    query: Result<Query<BTreeMap<String, String>>, axum::extract::rejection::QueryRejection>,
    body: Bytes,
) -> Response {
    let query = match query {
        Ok(Query(q)) => q,
        Err(e) => return to_http(ApiError::bad_request(format!("query string: {e}")).into_response()),
    };
    let req = ApiRequest {
        method: method.as_str().to_string(),
        path: uri.path().to_string(),
        query,
        token: bearer(&headers),
        body: body.to_vec(),
    };
    match tokio::task::spawn_blocking(move || api.handle(&req)).await {
        Ok(r) => to_http(r),
        Err(e) => to_http(ApiError::internal(format!("handler failed: {e}")).into_response()),
    }
}

/// Serve until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    api: Api,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(api)).with_graceful_shutdown(shutdown).await
}
