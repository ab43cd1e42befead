//! Async client for `/api/generate`, `/api/version`, `/api/tags` and an
//! embedding provider's `/embed`.

use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize, Serializer};
use tokio::sync::Semaphore;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ErrorKind {
    Connect,
    Timeout,
    HttpStatus(u16),
    MalformedBody,
    ModelNotFound,
    DimensionMismatch { actual: usize, expected: usize },
}

impl ErrorKind {
    pub fn name(&self) -> &'static str {
        match self {
            ErrorKind::Connect => "Connect",
            ErrorKind::Timeout => "Timeout",
            ErrorKind::HttpStatus(_) => "HttpStatus",
            ErrorKind::MalformedBody => "MalformedBody",
            ErrorKind::ModelNotFound => "ModelNotFound",
            ErrorKind::DimensionMismatch { .. } => "DimensionMismatch",
        }
    }

    fn retryable(&self) -> bool {
        matches!(self, ErrorKind::Connect | ErrorKind::Timeout)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{kind:?}: {detail}")]
pub struct ClientError {
    pub kind: ErrorKind,
    pub detail: String,
    /// Number of HTTP attempts made before giving up.
    pub attempts: u32,
}

impl ClientError {
    fn new(kind: ErrorKind, detail: impl Into<String>) -> Self {
        Self {
            kind,
            detail: detail.into(),
            attempts: 1,
        }
    }

    pub fn kind(&self) -> &ErrorKind {
        &self.kind
    }
}

fn classify(e: reqwest::Error) -> ClientError {
    let kind = if e.is_timeout() {
        ErrorKind::Timeout
    } else if e.is_connect() || e.is_request() {
        ErrorKind::Connect
    } else if e.is_decode() || e.is_body() {
        ErrorKind::MalformedBody
    } else {
        ErrorKind::Connect
    };
    ClientError::new(kind, e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_backoff: Duration::from_millis(500),
            max_backoff: Duration::from_secs(10),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry `n` (0-based): doubling from the base, capped.
    pub fn delay(&self, n: u32) -> Duration {
        let factor = 1u32.checked_shl(n.min(31)).unwrap_or(u32::MAX);
        self.base_backoff.saturating_mul(factor).min(self.max_backoff)
    }

    pub fn schedule(&self) -> Vec<Duration> {
        (0..self.max_attempts.saturating_sub(1)).map(|n| self.delay(n)).collect()
    }
}

async fn with_retry<T, F, Fut>(policy: &RetryPolicy, mut call: F) -> Result<T, ClientError>
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = Result<T, ClientError>>,
{
    let max = policy.max_attempts.max(1);
    let mut attempt = 0;
    loop {
        attempt += 1;
        match call().await {
            Ok(v) => return Ok(v),
            Err(mut e) if !e.kind.retryable() || attempt >= max => {
                e.attempts = attempt;
                return Err(e);
            }
            Err(e) => {
                let delay = policy.delay(attempt - 1);
                tracing::warn!(attempt, ?delay, error = %e, "retrying request");
                tokio::time::sleep(delay).await;
            }
        }
    }
}

fn serialize_temperature<S: Serializer>(t: &f64, s: S) -> Result<S::Ok, S::Error> {
    if t.fract() == 0.0 && t.abs() < 1e15 {
        s.serialize_i64(*t as i64)
    } else {
        s.serialize_f64(*t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOptions {
    #[serde(serialize_with = "serialize_temperature")]
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(rename = "num_predict", skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            seed: None,
            max_tokens: None,
        }
    }
}

/// Body of `POST /api/generate`. Field order is the wire order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub model: String,
    pub prompt: String,
    pub images: Vec<String>,
    pub stream: bool,
    pub options: GenerationOptions,
}

impl GenerationRequest {
    pub fn new(model: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            prompt: prompt.into(),
            images: Vec::new(),
            stream: false,
            options: GenerationOptions::default(),
        }
    }

    pub fn with_image_bytes(mut self, bytes: &[u8]) -> Self {
        self.images.push(B64.encode(bytes));
        self
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.options.seed = seed;
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: Option<u32>) -> Self {
        self.options.max_tokens = max_tokens;
        self
    }

    pub fn body(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("request serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
    pub model: String,
    pub latency_ms: u64,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

#[derive(Deserialize)]
struct WireGenerate {
    model: Option<String>,
    response: String,
    prompt_eval_count: Option<u64>,
    eval_count: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerInfo {
    pub version: String,
    pub models: Vec<String>,
}

#[derive(Deserialize)]
struct WireVersion {
    version: String,
}

#[derive(Deserialize)]
struct WireTags {
    models: Vec<WireModel>,
}

#[derive(Deserialize)]
struct WireModel {
    name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientConfig {
    pub base_url: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub concurrency: usize,
}

impl ClientConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
            concurrency: 1,
        }
    }
}

fn build_http(timeout: Duration) -> Result<reqwest::Client, ClientError> {
    reqwest::Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| ClientError::new(ErrorKind::Connect, e.to_string()))
}

fn join_url(base: &str, path: &str) -> String {
    format!("{}{}", base.trim_end_matches('/'), path)
}

async fn read_body(resp: reqwest::Response) -> Result<(u16, Vec<u8>), ClientError> {
    let status = resp.status().as_u16();
    let bytes = resp.bytes().await.map_err(classify)?;
    Ok((status, bytes.to_vec()))
}

fn status_error(status: u16, body: &[u8]) -> ClientError {
    ClientError::new(ErrorKind::HttpStatus(status), String::from_utf8_lossy(body).into_owned())
}

/// Generation client; cheap to clone, shares one connection pool and semaphore.
#[derive(Debug, Clone)]
pub struct ModelClient {
    http: reqwest::Client,
    cfg: ClientConfig,
    permits: Arc<Semaphore>,
}

impl ModelClient {
    pub fn new(cfg: ClientConfig) -> Result<Self, ClientError> {
        Ok(Self {
            http: build_http(cfg.timeout)?,
            permits: Arc::new(Semaphore::new(cfg.concurrency.max(1))),
            cfg,
        })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    pub async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, ClientError> {
        let _permit = self.permits.acquire().await.expect("semaphore open");
        let url = join_url(&self.cfg.base_url, "/api/generate");
        let body = req.body();
        let started = Instant::now();
        let (status, bytes) = with_retry(&self.cfg.retry, || async {
            let resp = self
                .http
                .post(&url)
                .header("content-type", "application/json")
                .body(body.clone())
                .send()
                .await
                .map_err(classify)?;
            read_body(resp).await
        })
        .await?;
        let latency_ms = started.elapsed().as_millis() as u64;
        match status {
            200..=299 => {}
            404 => return Err(ClientError::new(ErrorKind::ModelNotFound, String::from_utf8_lossy(&bytes))),
            s => return Err(status_error(s, &bytes)),
        }
        let wire: WireGenerate =
            serde_json::from_slice(&bytes).map_err(|e| ClientError::new(ErrorKind::MalformedBody, e.to_string()))?;
        Ok(GenerationResponse {
            text: wire.response,
            model: wire.model.unwrap_or_else(|| req.model.clone()),
            latency_ms,
            prompt_tokens: wire.prompt_eval_count,
            completion_tokens: wire.eval_count,
        })
    }

    async fn get_json<T: for<'de> Deserialize<'de>>(&self, path: &str) -> Result<T, ClientError> {
        let url = join_url(&self.cfg.base_url, path);
        let (status, bytes) = with_retry(&self.cfg.retry, || async {
            let resp = self.http.get(&url).send().await.map_err(classify)?;
            read_body(resp).await
        })
        .await?;
        if !(200..300).contains(&status) {
            return Err(status_error(status, &bytes));
        }
        serde_json::from_slice(&bytes).map_err(|e| ClientError::new(ErrorKind::MalformedBody, e.to_string()))
    }

    pub async fn health_check(&self) -> Result<ServerInfo, ClientError> {
        let version: WireVersion = self.get_json("/api/version").await?;
        let tags: WireTags = self.get_json("/api/tags").await?;
        Ok(ServerInfo {
            version: version.version,
            models: tags.models.into_iter().map(|m| m.name).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingProviderConfig {
    pub endpoint: String,
    pub provider_id: String,
    pub dimension: usize,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub concurrency: usize,
}

impl EmbeddingProviderConfig {
    pub fn new(endpoint: impl Into<String>, provider_id: impl Into<String>, dimension: usize) -> Self {
        Self {
            endpoint: endpoint.into(),
            provider_id: provider_id.into(),
            dimension,
            timeout: Duration::from_secs(30),
            retry: RetryPolicy::default(),
            concurrency: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmbedPayload<'a> {
    Image(&'a [u8]),
    Text(&'a str),
}

#[derive(Serialize)]
struct WireEmbedRequest {
    kind: &'static str,
    data: String,
}

#[derive(Deserialize)]
struct WireEmbedResponse {
    vector: Vec<f64>,
    dim: Option<usize>,
    provider_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub provider_id: String,
}

#[derive(Debug, Clone)]
pub struct EmbeddingClient {
    http: reqwest::Client,
    cfg: EmbeddingProviderConfig,
    permits: Arc<Semaphore>,
}

impl EmbeddingClient {
    pub fn new(cfg: EmbeddingProviderConfig) -> Result<Self, ClientError> {
        if cfg.dimension == 0 {
            return Err(ClientError::new(
                ErrorKind::DimensionMismatch { actual: 0, expected: 0 },
                "expected dimension must be positive",
            ));
        }
        Ok(Self {
            http: build_http(cfg.timeout)?,
            permits: Arc::new(Semaphore::new(cfg.concurrency.max(1))),
            cfg,
        })
    }

    pub fn config(&self) -> &EmbeddingProviderConfig {
        &self.cfg
    }

    pub async fn embed(&self, payload: EmbedPayload<'_>) -> Result<Embedding, ClientError> {
        let _permit = self.permits.acquire().await.expect("semaphore open");
        let wire = match payload {
            EmbedPayload::Image(bytes) => WireEmbedRequest {
                kind: "image",
                data: B64.encode(bytes),
            },
            EmbedPayload::Text(t) => WireEmbedRequest {
                kind: "text",
                data: t.to_string(),
            },
        };
        let body = serde_json::to_vec(&wire).expect("embed request serializes");
        let url = join_url(&self.cfg.endpoint, "/embed");
        let (status, bytes) = with_retry(&self.cfg.retry, || async {
            let resp = self
                .http
                .post(&url)
                .header("content-type", "application/json")
                .body(body.clone())
                .send()
                .await
                .map_err(classify)?;
            read_body(resp).await
        })
        .await?;
        if !(200..300).contains(&status) {
            return Err(status_error(status, &bytes));
        }
        let resp: WireEmbedResponse =
            serde_json::from_slice(&bytes).map_err(|e| ClientError::new(ErrorKind::MalformedBody, e.to_string()))?;
        if resp.vector.iter().any(|v| !v.is_finite()) {
            return Err(ClientError::new(ErrorKind::MalformedBody, "non-finite vector entry"));
        }
        let actual = resp.vector.len();
        if actual != self.cfg.dimension || resp.dim.is_some_and(|d| d != actual) {
            return Err(ClientError::new(
                ErrorKind::DimensionMismatch {
                    actual,
                    expected: self.cfg.dimension,
                },
                format!("provider returned {actual} values"),
            ));
        }
        Ok(Embedding {
            vector: resp.vector,
            provider_id: resp.provider_id.unwrap_or_else(|| self.cfg.provider_id.clone()),
        })
    }
}
