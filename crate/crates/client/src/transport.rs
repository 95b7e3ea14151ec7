//! How requests reach the server.
//!
//! [`HttpTransport`] talks to a real gateway. [`Offline`] refuses every
//! request and counts attempts, so tests can prove a code path never
//! touches the network. [`FaultInjector`] wraps another transport and
//! drops selected requests or responses to simulate a broken connection.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Request {
    pub method: String,
    /// Absolute path starting with `/api`.
    pub path: String,
    pub query: Vec<(String, String)>,
    pub token: Option<String>,
    pub body: Vec<u8>,
    pub content_type: Option<&'static str>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub status: u16,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("{0}")]
pub struct TransportError(pub String);

pub trait Transport: Send + Sync {
    fn send(&self, req: &Request) -> Result<Response, TransportError>;
}

/// Largest response body accepted.
const MAX_RESPONSE_BYTES: u64 = 512 * 1024 * 1024;

pub struct HttpTransport {
    base: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    /// `base` is the gateway root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: &str) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_connect(Some(Duration::from_secs(10)))
            .timeout_global(Some(Duration::from_secs(300)))
            .build();
        Self {
            base: base.trim_end_matches('/').to_string(),
            agent: config.into(),
        }
    }
}

impl Transport for HttpTransport {
    fn send(&self, req: &Request) -> Result<Response, TransportError> {
        let mut url = format!("{}{}", self.base, req.path);
        if !req.query.is_empty() {
            let q: Vec<String> = req.query.iter().map(|(k, v)| format!("{}={}", encode(k), encode(v))).collect();
            url = format!("{url}?{}", q.join("&"));
        }
        let mut builder = ureq::http::Request::builder().method(req.method.as_str()).uri(&url);
        if let Some(t) = &req.token {
            builder = builder.header("Authorization", format!("Bearer {t}"));
        }
        if let Some(ct) = req.content_type {
            builder = builder.header("Content-Type", ct);
        }
        let request = builder.body(req.body.clone()).map_err(|e| TransportError(e.to_string()))?;
        let mut resp = self.agent.run(request).map_err(|e| TransportError(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .with_config()
            .limit(MAX_RESPONSE_BYTES)
            .read_to_vec()
            .map_err(|e| TransportError(e.to_string()))?;
        Ok(Response { status, body })
    }
}

/// Percent-encode everything outside the unreserved set.
fn encode(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.' | b'~') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

/// A transport with no network at all.
#[derive(Debug, Default)]
pub struct Offline {
    attempts: AtomicUsize,
}

impl Offline {
    pub fn attempts(&self) -> usize {
        self.attempts.load(Ordering::SeqCst)
    }
}

impl Transport for Offline {
    fn send(&self, _req: &Request) -> Result<Response, TransportError> {
        self.attempts.fetch_add(1, Ordering::SeqCst);
        Err(TransportError("offline".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// The request never reaches the server.
    DropRequest,
    /// The server handles the request but the reply is lost.
    DropResponse,
}

type Matcher = Box<dyn Fn(&Request) -> bool + Send + Sync>;

struct Plan {
    matcher: Matcher,
    /// Matching requests to let through before the fault fires.
    skip: usize,
    fault: Fault,
}

/// Wraps a transport, injects one-shot faults and logs delivered requests.
pub struct FaultInjector<T> {
    inner: T,
    plans: Mutex<Vec<Plan>>,
    log: Mutex<Vec<(String, String)>>,
}

impl<T: Transport> FaultInjector<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            plans: Mutex::new(Vec::new()),
            log: Mutex::new(Vec::new()),
        }
    }

    /// Let `skip` matching requests through, then apply `fault` to the next.
    pub fn fail_after(&self, skip: usize, fault: Fault, matcher: impl Fn(&Request) -> bool + Send + Sync + 'static) {
        self.plans.lock().unwrap().push(Plan {
            matcher: Box::new(matcher),
            skip,
            fault,
        });
    }

    /// `(method, path)` of every request that reached the inner transport.
    pub fn delivered(&self) -> Vec<(String, String)> {
        self.log.lock().unwrap().clone()
    }

    pub fn clear_log(&self) {
        self.log.lock().unwrap().clear();
    }

    pub fn inner(&self) -> &T {
        &self.inner
    }
}

impl<T: Transport> Transport for FaultInjector<T> {
    fn send(&self, req: &Request) -> Result<Response, TransportError> {
        let fault = {
            let mut plans = self.plans.lock().unwrap();
            let hit = plans.iter_mut().position(|p| {
                if !(p.matcher)(req) {
                    return false;
                }
                if p.skip > 0 {
                    p.skip -= 1;
                    return false;
                }
                true
            });
            hit.map(|i| plans.remove(i).fault)
        };
        if fault == Some(Fault::DropRequest) {
            return Err(TransportError("connection reset (injected)".into()));
        }
        self.log.lock().unwrap().push((req.method.clone(), req.path.clone()));
        let resp = self.inner.send(req)?;
        if fault == Some(Fault::DropResponse) {
            return Err(TransportError("connection reset after send (injected)".into()));
        }
        Ok(resp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Echo;

    impl Transport for Echo {
        fn send(&self, req: &Request) -> Result<Response, TransportError> {
            Ok(Response { status: 200, body: req.path.clone().into_bytes() })
        }
    }

    fn get(path: &str) -> Request {
        Request { method: "GET".into(), path: path.into(), ..Request::default() }
    }

    #[test]
    fn faults_fire_once_after_skipping() {
        let f = FaultInjector::new(Echo);
        f.fail_after(1, Fault::DropRequest, |r| r.path.starts_with("/a"));
        f.fail_after(0, Fault::DropResponse, |r| r.path == "/b");
        assert!(f.send(&get("/a1")).is_ok());
        assert!(f.send(&get("/a2")).is_err());
        assert!(f.send(&get("/a3")).is_ok());
        assert!(f.send(&get("/b")).is_err());
        assert!(f.send(&get("/b")).is_ok());
        let paths: Vec<String> = f.delivered().into_iter().map(|(_, p)| p).collect();
        // the dropped response still reached the server
        assert_eq!(paths, ["/a1", "/a3", "/b", "/b"]);
    }

    #[test]
    fn offline_counts_attempts() {
        let o = Offline::default();
        assert!(o.send(&get("/x")).is_err());
        assert_eq!(o.attempts(), 1);
    }

    #[test]
    fn query_encoding() {
        assert_eq!(encode("a b/c"), "a%20b%2Fc");
        assert_eq!(encode("ok-_.~"), "ok-_.~");
    }
}
