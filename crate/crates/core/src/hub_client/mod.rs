//! Crawler for a model-hub HTTP API.
//!
//! Listing is cursor-paginated (`GET {base}/api/models?cursor=&limit=&since=`)
//! and runs sequentially; per-model details (`GET {base}/api/models/{id}`)
//! are fetched by a bounded pool of in-flight requests. Every request, list
//! or detail, first takes a token from one shared [`TokenBucket`].

mod limiter;
mod retry;

use std::collections::{BTreeMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use chrono::{DateTime, SecondsFormat, Utc};
use futures::stream::{self, StreamExt};
use reqwest::{StatusCode, Url};
use serde::Deserialize;
use serde_json::Value;

pub use limiter::TokenBucket;
pub use retry::{backoff_delay, is_retryable_status};

/// Environment variable holding the bearer token.
pub const TOKEN_ENV: &str = "HUB_TOKEN";

/// The bucket runs slightly under the configured rate so that network jitter
/// between issue and arrival cannot push a server-side window over the limit.
pub const RATE_HEADROOM: f64 = 0.95;

const REQUEST_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrawlConfig {
    pub base_url: String,
    #[serde(default)]
    pub auth_token: Option<String>,
    #[serde(default = "defaults::rps")]
    pub max_requests_per_second: f64,
    #[serde(default = "defaults::concurrency")]
    pub max_concurrent_requests: usize,
    #[serde(default = "defaults::retries")]
    pub max_retries: u32,
    #[serde(default = "defaults::backoff")]
    pub backoff_base_ms: u64,
    #[serde(default = "defaults::page_size")]
    pub page_size: usize,
    #[serde(default)]
    pub since: Option<DateTime<Utc>>,
}

mod defaults {
    pub fn rps() -> f64 {
        10.0
    }
    pub fn concurrency() -> usize {
        4
    }
    pub fn retries() -> u32 {
        5
    }
    pub fn backoff() -> u64 {
        100
    }
    pub fn page_size() -> usize {
        100
    }
}

impl CrawlConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        CrawlConfig {
            base_url: base_url.into(),
            auth_token: None,
            max_requests_per_second: defaults::rps(),
            max_concurrent_requests: defaults::concurrency(),
            max_retries: defaults::retries(),
            backoff_base_ms: defaults::backoff(),
            page_size: defaults::page_size(),
            since: None,
        }
    }

    /// Fills `auth_token` from `HUB_TOKEN` when not already set.
    pub fn with_env_token(mut self) -> Self {
        if self.auth_token.is_none() {
            self.auth_token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
        }
        self
    }

    pub fn validate(&self) -> Result<Url, CrawlError> {
        let url = Url::parse(&self.base_url).map_err(|e| CrawlError::Config(format!("base_url: {e}")))?;
        if !matches!(url.scheme(), "http" | "https") {
            return Err(CrawlError::Config(format!("base_url scheme `{}` is not http(s)", url.scheme())));
        }
        if !(self.max_requests_per_second.is_finite() && self.max_requests_per_second > 0.0) {
            return Err(CrawlError::Config("max_requests_per_second must be > 0".into()));
        }
        if self.max_concurrent_requests == 0 {
            return Err(CrawlError::Config("max_concurrent_requests must be >= 1".into()));
        }
        if self.page_size == 0 {
            return Err(CrawlError::Config("page_size must be >= 1".into()));
        }
        if self.backoff_base_ms == 0 {
            return Err(CrawlError::Config("backoff_base_ms must be >= 1".into()));
        }
        Ok(url)
    }

    pub fn backoff_delay(&self, attempt: u32) -> Duration {
        backoff_delay(self.backoff_base_ms, attempt)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CrawlError {
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("authentication rejected (HTTP {0})")]
    Auth(u16),
    #[error("malformed response: {0}")]
    Decode(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("throttled after retries")]
    Throttled,
    #[error("HTTP {0}")]
    Status(u16),
    #[error("invalid crawl config: {0}")]
    Config(String),
}

impl CrawlError {
    pub fn class(&self) -> &'static str {
        match self {
            CrawlError::Transient(_) => "transient",
            CrawlError::Auth(_) => "auth",
            CrawlError::Decode(_) => "decode",
            CrawlError::NotFound(_) => "not_found",
            CrawlError::Throttled => "throttled",
            CrawlError::Status(_) => "status",
            CrawlError::Config(_) => "config",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawModelPage {
    pub items: Vec<Value>,
    pub next_cursor: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrawlReport {
    pub models_fetched: usize,
    pub requests_made: u64,
    pub retries: u64,
    pub failures: Vec<(String, String)>,
    pub wall_time_ms: u64,
    pub observed_peak_rps: f64,
}

/// Receives detail documents as they arrive. Must be idempotent by id.
pub trait RecordSink: Send + Sync {
    fn accept(&self, model_id: &str, document: Value);
}

/// Sink keeping the latest document per id.
#[derive(Debug, Default)]
pub struct MemorySink {
    docs: Mutex<BTreeMap<String, Value>>,
    accepted: AtomicU64,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    /// Total `accept` calls, duplicates included.
    pub fn accept_calls(&self) -> u64 {
        self.accepted.load(Ordering::Relaxed)
    }

    pub fn into_documents(self) -> BTreeMap<String, Value> {
        self.docs.into_inner().expect("sink lock poisoned")
    }

    pub fn ids(&self) -> Vec<String> {
        self.docs.lock().expect("sink lock poisoned").keys().cloned().collect()
    }
}

impl RecordSink for MemorySink {
    fn accept(&self, model_id: &str, document: Value) {
        self.accepted.fetch_add(1, Ordering::Relaxed);
        self.docs.lock().expect("sink lock poisoned").insert(model_id.to_owned(), document);
    }
}

/// A configured client. Request counters accumulate over its lifetime.
pub struct HubClient {
    config: CrawlConfig,
    base: Url,
    http: reqwest::Client,
    bucket: TokenBucket,
    requests: AtomicU64,
    retries: AtomicU64,
    /// Issue instants, flagged when the request had to wait for a token.
    issued: Mutex<Vec<(Instant, bool)>>,
}

impl HubClient {
    pub fn new(config: CrawlConfig) -> Result<Self, CrawlError> {
        let base = config.validate()?;
        let http = reqwest::Client::builder()
            .timeout(REQUEST_TIMEOUT)
            .user_agent(concat!("hubcohort/", env!("CARGO_PKG_VERSION")))
            .build()
            .map_err(|e| CrawlError::Config(e.to_string()))?;
        let rate = config.max_requests_per_second;
        // Capacity is one second of tokens at the nominal rate.
        let bucket = TokenBucket::new(rate * RATE_HEADROOM, rate.max(1.0));
        Ok(HubClient {
            config,
            base,
            http,
            bucket,
            requests: AtomicU64::new(0),
            retries: AtomicU64::new(0),
            issued: Mutex::new(Vec::new()),
        })
    }

    pub fn config(&self) -> &CrawlConfig {
        &self.config
    }

    pub fn requests_made(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    pub fn retries(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }

    fn models_url(&self) -> Url {
        let mut url = self.base.clone();
        url.path_segments_mut().expect("http url has a path").pop_if_empty().extend(["api", "models"]);
        url
    }

    fn detail_url(&self, model_id: &str) -> Url {
        let mut url = self.models_url();
        url.path_segments_mut().expect("http url has a path").extend(model_id.split('/'));
        url
    }

    /// GET with rate limiting and retries on 429, 5xx and transport errors.
    async fn get_json(&self, url: Url, what: &str) -> Result<Value, CrawlError> {
        let mut last = CrawlError::Transient("no attempt made".into());
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                tokio::time::sleep(self.config.backoff_delay(attempt - 1)).await;
                self.retries.fetch_add(1, Ordering::Relaxed);
            }
            let waited = self.bucket.acquire().await;
            self.requests.fetch_add(1, Ordering::Relaxed);
            self.issued.lock().expect("issue log poisoned").push((Instant::now(), waited));

            let mut req = self.http.get(url.clone());
            if let Some(token) = &self.config.auth_token {
                req = req.bearer_auth(token);
            }
            let resp = match req.send().await {
                Ok(r) => r,
                Err(e) => {
                    last = CrawlError::Transient(e.to_string());
                    continue;
                }
            };
            let status = resp.status();
            match status {
                s if s.is_success() => {
                    let body = match resp.bytes().await {
                        Ok(b) => b,
                        Err(e) => {
                            last = CrawlError::Transient(e.to_string());
                            continue;
                        }
                    };
                    return serde_json::from_slice(&body).map_err(|e| CrawlError::Decode(format!("{what}: {e}")));
                }
                StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => return Err(CrawlError::Auth(status.as_u16())),
                StatusCode::NOT_FOUND => return Err(CrawlError::NotFound(what.to_owned())),
                StatusCode::TOO_MANY_REQUESTS => last = CrawlError::Throttled,
                s if is_retryable_status(s.as_u16()) => {
                    last = CrawlError::Transient(format!("{what}: HTTP {}", s.as_u16()));
                }
                s => return Err(CrawlError::Status(s.as_u16())),
            }
        }
        Err(last)
    }

    pub async fn list_models(&self, cursor: Option<&str>) -> Result<RawModelPage, CrawlError> {
        let mut url = self.models_url();
        {
            let mut q = url.query_pairs_mut();
            q.append_pair("limit", &self.config.page_size.to_string());
            if let Some(c) = cursor {
                q.append_pair("cursor", c);
            }
            if let Some(since) = self.config.since {
                q.append_pair("since", &since.to_rfc3339_opts(SecondsFormat::AutoSi, true));
            }
        }
        let body = self.get_json(url, "model listing").await?;
        let items = match body.get("items") {
            Some(Value::Array(items)) => items.clone(),
            _ => return Err(CrawlError::Decode("listing without an `items` array".into())),
        };
        if items.len() > self.config.page_size {
            return Err(CrawlError::Decode(format!(
                "page of {} items exceeds page_size {}",
                items.len(),
                self.config.page_size
            )));
        }
        let next_cursor = match body.get("next_cursor") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(other) => return Err(CrawlError::Decode(format!("next_cursor is not a string: {other}"))),
        };
        Ok(RawModelPage { items, next_cursor })
    }

    pub async fn fetch_model_detail(&self, model_id: &str) -> Result<Value, CrawlError> {
        if model_id.is_empty() {
            return Err(CrawlError::Config("empty model id".into()));
        }
        let doc = self.get_json(self.detail_url(model_id), model_id).await?;
        if !doc.is_object() {
            return Err(CrawlError::Decode(format!("{model_id}: detail is not an object")));
        }
        Ok(doc)
    }

    /// Every id from the listing, in listing order, first occurrence only.
    pub async fn list_all_ids(&self) -> Result<Vec<String>, CrawlError> {
        let mut seen = HashSet::new();
        let mut ids = Vec::new();
        let mut cursor: Option<String> = None;
        loop {
            let page = self.list_models(cursor.as_deref()).await?;
            for item in &page.items {
                let id = item
                    .get("id")
                    .or_else(|| item.get("model_id"))
                    .or_else(|| item.get("modelId"))
                    .and_then(Value::as_str)
                    .ok_or_else(|| CrawlError::Decode("listing item without id".into()))?;
                if seen.insert(id.to_owned()) {
                    ids.push(id.to_owned());
                }
            }
            match page.next_cursor {
                Some(c) => cursor = Some(c),
                None => return Ok(ids),
            }
        }
    }

    /// Lists every model, then fetches details with at most
    /// `max_concurrent_requests` in flight. Failed details are reported, not
    /// fatal; a failed listing aborts the crawl.
    pub async fn crawl_all(&self, sink: &dyn RecordSink) -> Result<CrawlReport, CrawlError> {
        let start = Instant::now();
        let requests_before = self.requests_made();
        let retries_before = self.retries();
        let issued_before = self.issued.lock().expect("issue log poisoned").len();

        let ids = self.list_all_ids().await?;
        let mut models_fetched = 0;
        let mut failures = Vec::new();
        let mut results = stream::iter(ids)
            .map(|id| async move {
                let r = self.fetch_model_detail(&id).await;
                (id, r)
            })
            .buffer_unordered(self.config.max_concurrent_requests);
        while let Some((id, result)) = results.next().await {
            match result {
                Ok(doc) => {
                    sink.accept(&id, doc);
                    models_fetched += 1;
                }
                Err(e) => {
                    log::warn!("{id}: {e}");
                    failures.push((id, e.class().to_owned()));
                }
            }
        }
        failures.sort();

        let issued = self.issued.lock().expect("issue log poisoned");
        let peak = peak_rate(&issued[issued_before..]);
        Ok(CrawlReport {
            models_fetched,
            requests_made: self.requests_made() - requests_before,
            retries: self.retries() - retries_before,
            failures,
            wall_time_ms: start.elapsed().as_millis() as u64,
            observed_peak_rps: peak,
        })
    }
}

/// Largest number of requests issued inside any one-second window, counting
/// only windows that open once the bucket has first run dry. Before that the
/// requests are the full bucket's burst. When the bucket never ran dry the
/// limiter never engaged and the plain peak is reported.
pub fn peak_rate(issued: &[(Instant, bool)]) -> f64 {
    let from = issued.iter().position(|&(_, waited)| waited).unwrap_or(0);
    let window = Duration::from_secs(1);
    let mut best = 0;
    let mut hi = from;
    for lo in from..issued.len() {
        while hi < issued.len() && issued[hi].0.duration_since(issued[lo].0) < window {
            hi += 1;
        }
        best = best.max(hi - lo);
    }
    best as f64
}

pub async fn list_models(config: &CrawlConfig, cursor: Option<&str>) -> Result<RawModelPage, CrawlError> {
    HubClient::new(config.clone())?.list_models(cursor).await
}

pub async fn fetch_model_detail(config: &CrawlConfig, model_id: &str) -> Result<Value, CrawlError> {
    HubClient::new(config.clone())?.fetch_model_detail(model_id).await
}

pub async fn crawl_all(config: &CrawlConfig, sink: &dyn RecordSink) -> Result<CrawlReport, CrawlError> {
    HubClient::new(config.clone())?.crawl_all(sink).await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(CrawlConfig::new("http://127.0.0.1:1").validate().is_ok());
        assert!(CrawlConfig::new("not a url").validate().is_err());
        assert!(CrawlConfig::new("ftp://x").validate().is_err());
        let mut c = CrawlConfig::new("http://h");
        c.max_requests_per_second = 0.0;
        assert!(c.validate().is_err());
        let mut c = CrawlConfig::new("http://h");
        c.max_concurrent_requests = 0;
        assert!(c.validate().is_err());
        let mut c = CrawlConfig::new("http://h");
        c.page_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn urls_keep_namespace_slash() {
        let c = HubClient::new(CrawlConfig::new("http://h:1/prefix/")).unwrap();
        assert_eq!(c.detail_url("org/model v2").as_str(), "http://h:1/prefix/api/models/org/model%20v2");
        assert_eq!(c.models_url().as_str(), "http://h:1/prefix/api/models");
    }

    #[test]
    fn peak_rate_windows() {
        let t0 = Instant::now();
        let at = |ms: u64, waited: bool| (t0 + Duration::from_millis(ms), waited);
        let ts: Vec<_> = (0..10).map(|i| at(i * 250, false)).collect();
        assert_eq!(peak_rate(&ts), 4.0);
        // A burst of six, then throttled issues every 500 ms.
        let mut burst: Vec<_> = (0..6).map(|i| at(i, false)).collect();
        burst.extend((1..5).map(|i| at(i * 500, true)));
        assert_eq!(peak_rate(&burst), 2.0);
        assert_eq!(peak_rate(&[]), 0.0);
    }

    #[tokio::test]
    async fn unreachable_base_is_transient() {
        // Bind then drop to get a closed port.
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let mut c = CrawlConfig::new(format!("http://127.0.0.1:{port}"));
        c.max_retries = 1;
        c.backoff_base_ms = 1;
        let client = HubClient::new(c).unwrap();
        let err = client.crawl_all(&MemorySink::new()).await.unwrap_err();
        assert_eq!(err.class(), "transient");
        assert_eq!(client.requests_made(), 2);
    }
}
