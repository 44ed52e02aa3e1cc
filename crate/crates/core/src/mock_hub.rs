//! Loopback HTTP server serving a fixture population with the hub's listing
//! and detail endpoints, deterministic fault injection and a request log.

use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::extract::{OriginalUri, Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde_json::{json, Value};
use tokio::sync::oneshot;

/// Keys dropped from listing items; they only appear in detail documents.
const DETAIL_ONLY: [&str; 4] = ["commits", "discussions", "card", "cardData"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FaultPlan {
    pub seed: u64,
    /// Probability that an attempt is answered with 429.
    pub rate_429: f64,
    /// Probability that an attempt is answered with 500.
    pub rate_500: f64,
    /// Every detail request fails with 500.
    pub always_fail_details: bool,
    /// When set, requests without `Authorization: Bearer <token>` get 401.
    pub required_token: Option<String>,
    pub latency: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    /// Arrival time relative to server start.
    pub at: Duration,
    pub path: String,
    pub status: u16,
}

struct Model {
    id: String,
    last_modified: DateTime<Utc>,
    detail: Value,
}

struct Hub {
    models: Vec<Model>,
    index: HashMap<String, usize>,
    faults: FaultPlan,
    attempts: Mutex<HashMap<String, u32>>,
    log: Mutex<Vec<LogEntry>>,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
    start: Instant,
}

pub struct MockHub {
    addr: SocketAddr,
    hub: Arc<Hub>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl MockHub {
    /// Serves `documents` (detail documents, each with an `id`) on an
    /// ephemeral loopback port from a dedicated thread.
    pub fn start(documents: Vec<Value>, faults: FaultPlan) -> std::io::Result<MockHub> {
        Self::start_on(documents, faults, 0)
    }

    pub fn start_on(documents: Vec<Value>, faults: FaultPlan, port: u16) -> std::io::Result<MockHub> {
        let mut models: Vec<Model> = documents
            .into_iter()
            .map(|detail| {
                let id = detail["id"].as_str().expect("fixture documents carry an id").to_owned();
                let last_modified = detail["lastModified"]
                    .as_str()
                    .and_then(|s| DateTime::parse_from_rfc3339(s).ok())
                    .map_or(DateTime::UNIX_EPOCH, |t| t.with_timezone(&Utc));
                Model { id, last_modified, detail }
            })
            .collect();
        models.sort_by(|a, b| a.id.cmp(&b.id));
        models.dedup_by(|a, b| a.id == b.id);
        let index = models.iter().enumerate().map(|(i, m)| (m.id.clone(), i)).collect();
        let hub = Arc::new(Hub {
            models,
            index,
            faults,
            attempts: Mutex::default(),
            log: Mutex::default(),
            in_flight: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
            start: Instant::now(),
        });

        let listener = std::net::TcpListener::bind(("127.0.0.1", port))?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let app = Router::new()
            .route("/api/models", get(list))
            .route("/api/models/{*id}", get(detail))
            .with_state(hub.clone());
        let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        let thread = std::thread::Builder::new().name("mock-hub".into()).spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
                    .expect("mock hub server");
            });
        })?;
        Ok(MockHub { addr, hub, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn ids(&self) -> Vec<String> {
        self.hub.models.iter().map(|m| m.id.clone()).collect()
    }

    pub fn log(&self) -> Vec<LogEntry> {
        self.hub.log.lock().expect("log poisoned").clone()
    }

    pub fn request_count(&self) -> usize {
        self.hub.log.lock().expect("log poisoned").len()
    }

    pub fn peak_in_flight(&self) -> usize {
        self.hub.peak_in_flight.load(Ordering::SeqCst)
    }

    /// Largest number of arrivals inside a one-second window whose first
    /// arrival is at or after `after` (relative to the first arrival).
    pub fn peak_window_after(&self, after: Duration) -> usize {
        let mut at: Vec<Duration> = self.log().iter().map(|e| e.at).collect();
        at.sort();
        let Some(&first) = at.first() else { return 0 };
        let mut best = 0;
        let mut hi = 0;
        for lo in 0..at.len() {
            if at[lo] - first < after {
                continue;
            }
            hi = hi.max(lo);
            while hi < at.len() && at[hi] - at[lo] < Duration::from_secs(1) {
                hi += 1;
            }
            best = best.max(hi - lo);
        }
        best
    }

    /// Largest number of arrivals inside any one-second window.
    pub fn peak_window(&self) -> usize {
        self.peak_window_after(Duration::ZERO)
    }
}

impl Drop for MockHub {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Hub {
    fn attempt_of(&self, key: &str) -> u32 {
        let mut attempts = self.attempts.lock().expect("attempts poisoned");
        let n = attempts.entry(key.to_owned()).or_insert(0);
        *n += 1;
        *n
    }

    /// Fault for this attempt, if any. Deterministic in (seed, key, attempt).
    fn injected(&self, key: &str, is_detail: bool, headers: &HeaderMap) -> Option<StatusCode> {
        if let Some(token) = &self.faults.required_token {
            let ok = headers
                .get("authorization")
                .and_then(|v| v.to_str().ok())
                .is_some_and(|v| v == format!("Bearer {token}"));
            if !ok {
                return Some(StatusCode::UNAUTHORIZED);
            }
        }
        if is_detail && self.faults.always_fail_details {
            return Some(StatusCode::INTERNAL_SERVER_ERROR);
        }
        let attempt = self.attempt_of(key);
        let mut h = DefaultHasher::new();
        (self.faults.seed, key, attempt).hash(&mut h);
        let u = (h.finish() >> 11) as f64 / (1u64 << 53) as f64;
        if u < self.faults.rate_429 {
            Some(StatusCode::TOO_MANY_REQUESTS)
        } else if u < self.faults.rate_429 + self.faults.rate_500 {
            Some(StatusCode::INTERNAL_SERVER_ERROR)
        } else {
            None
        }
    }

    async fn serve(&self, key: String, is_detail: bool, headers: &HeaderMap, body: impl FnOnce() -> Response) -> Response {
        let at = self.start.elapsed();
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        if !self.faults.latency.is_zero() {
            tokio::time::sleep(self.faults.latency).await;
        }
        let resp = match self.injected(&key, is_detail, headers) {
            Some(status) => (status, Json(json!({"error": status.canonical_reason()}))).into_response(),
            None => body(),
        };
        self.log.lock().expect("log poisoned").push(LogEntry { at, path: key, status: resp.status().as_u16() });
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        resp
    }
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

async fn list(
    State(hub): State<Arc<Hub>>,
    OriginalUri(uri): OriginalUri,
    headers: HeaderMap,
    Query(q): Query<HashMap<String, String>>,
) -> Response {
    let key = uri.to_string();
    hub.serve(key, false, &headers, || {
        let limit = match q.get("limit").map(|l| l.parse::<usize>()) {
            None => 100,
            Some(Ok(l)) if l > 0 => l,
            _ => return error(StatusCode::BAD_REQUEST, "bad limit"),
        };
        let since = match q.get("since").filter(|s| !s.is_empty()) {
            None => None,
            Some(s) => match DateTime::parse_from_rfc3339(s) {
                Ok(t) => Some(t.with_timezone(&Utc)),
                Err(_) => return error(StatusCode::BAD_REQUEST, "bad since"),
            },
        };
        let offset = match q.get("cursor").filter(|c| !c.is_empty()) {
            None => 0,
            Some(c) => match c.strip_prefix("o").and_then(|o| o.parse::<usize>().ok()) {
                Some(o) => o,
                None => return error(StatusCode::BAD_REQUEST, "bad cursor"),
            },
        };
        let matching: Vec<&Model> =
            hub.models.iter().filter(|m| since.is_none_or(|t| m.last_modified >= t)).collect();
        let items: Vec<Value> = matching
            .iter()
            .skip(offset)
            .take(limit)
            .map(|m| {
                let mut summary = m.detail.clone();
                if let Some(o) = summary.as_object_mut() {
                    DETAIL_ONLY.iter().for_each(|k| {
                        o.remove(*k);
                    });
                }
                summary
            })
            .collect();
        let end = offset + items.len();
        let next = (end < matching.len()).then(|| format!("o{end}"));
        Json(json!({ "items": items, "next_cursor": next })).into_response()
    })
    .await
}

async fn detail(
    State(hub): State<Arc<Hub>>,
    OriginalUri(uri): OriginalUri,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Response {
    hub.serve(uri.path().to_owned(), true, &headers, || match hub.index.get(&id) {
        Some(&i) => Json(hub.models[i].detail.clone()).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("no model {id}")),
    })
    .await
}
