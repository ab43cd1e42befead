//! In-process stand-in for a local model server and embedding provider.
//!
//! Replies are pure functions of the request, so repeated runs against the
//! mock are byte-identical.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum MockReply {
    /// Deterministic pseudo-report derived from the request hash.
    Synthetic,
    /// Always this text.
    Fixed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockConfig {
    pub version: String,
    pub models: Vec<String>,
    pub reply: MockReply,
    pub provider_id: String,
    /// Embedding dimension; must be a perfect square for image embeddings.
    pub embed_dim: usize,
    /// Raw body returned by `/embed` instead of a computed vector.
    pub embed_override: Option<String>,
    /// Artificial latency for every generate call.
    pub delay: Duration,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            version: "0.0.0-mock".to_string(),
            models: vec!["mock-vlm".to_string()],
            reply: MockReply::Synthetic,
            provider_id: "mock-pool8".to_string(),
            embed_dim: 64,
            embed_override: None,
            delay: Duration::ZERO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordedRequest {
    pub path: String,
    pub body: Vec<u8>,
}

#[derive(Debug)]
struct Shared {
    cfg: MockConfig,
    log: Mutex<Vec<RecordedRequest>>,
}

type AppState = Arc<Shared>;

/// A running mock server bound to a local port.
#[derive(Debug)]
pub struct MockServer {
    addr: SocketAddr,
    state: AppState,
    task: JoinHandle<()>,
}

impl MockServer {
    /// Bind `127.0.0.1:0` and serve in the background.
    pub async fn start(cfg: MockConfig) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0").await?;
        Self::start_on(listener, cfg)
    }

    pub fn start_on(listener: TcpListener, cfg: MockConfig) -> std::io::Result<Self> {
        let addr = listener.local_addr()?;
        let state = Arc::new(Shared {
            cfg,
            log: Mutex::new(Vec::new()),
        });
        let app = router(state.clone());
        let task = tokio::spawn(async move {
            let _ = axum::serve(listener, app).await;
        });
        Ok(Self { addr, state, task })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.state.log.lock().expect("log lock").clone()
    }

    pub fn request_count(&self, path: &str) -> usize {
        self.state.log.lock().expect("log lock").iter().filter(|r| r.path == path).count()
    }

    pub fn shutdown(self) {
        self.task.abort();
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

/// Serve until the process exits.
pub async fn serve_forever(listener: TcpListener, cfg: MockConfig) -> std::io::Result<()> {
    let state = Arc::new(Shared {
        cfg,
        log: Mutex::new(Vec::new()),
    });
    axum::serve(listener, router(state)).await
}

fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/version", get(version))
        .route("/api/tags", get(tags))
        .route("/api/generate", post(generate))
        .route("/embed", post(embed))
        .with_state(state)
}

fn record(state: &AppState, path: &str, body: &[u8]) {
    state.log.lock().expect("log lock").push(RecordedRequest {
        path: path.to_string(),
        body: body.to_vec(),
    });
}

async fn version(State(state): State<AppState>) -> Json<serde_json::Value> {
    record(&state, "/api/version", b"");
    Json(json!({ "version": state.cfg.version }))
}

async fn tags(State(state): State<AppState>) -> Json<serde_json::Value> {
    record(&state, "/api/tags", b"");
    let models: Vec<_> = state.cfg.models.iter().map(|m| json!({ "name": m, "model": m })).collect();
    Json(json!({ "models": models }))
}

#[derive(Deserialize)]
struct GenerateBody {
    model: String,
    prompt: String,
    #[serde(default)]
    images: Vec<String>,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn generate(State(state): State<AppState>, body: axum::body::Bytes) -> Response {
    record(&state, "/api/generate", &body);
    if !state.cfg.delay.is_zero() {
        tokio::time::sleep(state.cfg.delay).await;
    }
    let req: GenerateBody = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    if !state.cfg.models.iter().any(|m| m == &req.model) {
        return error(StatusCode::NOT_FOUND, format!("model '{}' not found", req.model));
    }
    let text = match &state.cfg.reply {
        MockReply::Fixed(t) => t.clone(),
        MockReply::Synthetic => synthetic_reply(&req.model, &req.prompt, &req.images),
    };
    let eval_count = text.split_whitespace().count();
    Json(json!({
        "model": req.model,
        "created_at": "1970-01-01T00:00:00Z",
        "response": text,
        "done": true,
        "prompt_eval_count": req.prompt.split_whitespace().count(),
        "eval_count": eval_count,
    }))
    .into_response()
}

const FINDINGS: [&str; 6] = [
    "Healthy Breast. No Findings",
    "Mass in right CC view",
    "Suspicious Calcification in left MLO view",
    "Focal Asymmetry in right MLO view; Mass in left CC view",
    "No mass. Benign calcification in left CC view",
    "Architectural Distortion in left MLO view",
];

/// Pseudo-report chosen by hashing the request. About one answer in ten is
/// unusable prose and one in ten is missing fields, so parsers and the
/// unparsed bucket see realistic traffic.
pub fn synthetic_reply(model: &str, prompt: &str, images: &[String]) -> String {
    let mut h = Sha256::new();
    h.update(model.as_bytes());
    h.update([0]);
    h.update(prompt.as_bytes());
    // The query image is last; hashing only it keeps replies stable when
    // exemplar attachments change.
    if let Some(img) = images.last() {
        h.update([0]);
        h.update(img.as_bytes());
    }
    let d = h.finalize();
    let birads = 1 + d[0] % 5;
    let density = (b'A' + d[1] % 4) as char;
    let findings = FINDINGS[(d[2] % FINDINGS.len() as u8) as usize];
    let suspicion = match birads {
        1 => "healthy",
        2 | 3 => "benign",
        _ => "suspicious",
    };
    match d[3] % 10 {
        0 => "I am unable to provide a reliable assessment of this examination.".to_string(),
        1 => format!("Assessment: BI-RADS {birads}. Breast density {density}."),
        2 => format!(
            "Here is the report:\n```json\n{{\n  \"breast_density\": \"Density {density}\",\n  \"findings\": \"{findings}\",\n  \"BI-RADS\": \"BI-RADS {birads}\",\n  \"suspicion\": \"{suspicion}\",\n}}\n```"
        ),
        _ => json!({
            "breast_density": format!("Density {density}"),
            "findings": findings,
            "BI-RADS": format!("BI-RADS {birads}"),
            "suspicion": suspicion,
        })
        .to_string(),
    }
}

#[derive(Deserialize)]
struct EmbedBody {
    kind: String,
    data: String,
}

async fn embed(State(state): State<AppState>, body: axum::body::Bytes) -> Response {
    record(&state, "/embed", &body);
    if let Some(raw) = &state.cfg.embed_override {
        return (StatusCode::OK, [("content-type", "application/json")], raw.clone()).into_response();
    }
    let req: EmbedBody = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let dim = state.cfg.embed_dim;
    let vector = match req.kind.as_str() {
        "image" => {
            let bytes = match B64.decode(req.data.as_bytes()) {
                Ok(b) => b,
                Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
            };
            match pooled_image_embedding(&bytes, dim) {
                Ok(v) => v,
                Err(e) => return error(StatusCode::BAD_REQUEST, e),
            }
        }
        "text" => hashed_text_embedding(&req.data, dim),
        other => return error(StatusCode::BAD_REQUEST, format!("unknown kind {other:?}")),
    };
    Json(json!({ "vector": vector, "dim": vector.len(), "provider_id": state.cfg.provider_id })).into_response()
}

/// Average-pool a grayscale version of the image onto a `g x g` grid, `g*g = dim`,
/// scaled to [0, 1] plus a small bias so no vector is all zeros.
pub fn pooled_image_embedding(png: &[u8], dim: usize) -> Result<Vec<f64>, String> {
    let g = (dim as f64).sqrt() as usize;
    if g == 0 || g * g != dim {
        return Err(format!("image embedding dimension {dim} is not a square"));
    }
    let img = image::load_from_memory(png).map_err(|e| e.to_string())?.to_luma8();
    let (w, h) = img.dimensions();
    let mut sums = vec![0.0f64; dim];
    let mut counts = vec![0u64; dim];
    for (x, y, p) in img.enumerate_pixels() {
        let gx = (x as usize * g) / w as usize;
        let gy = (y as usize * g) / h as usize;
        sums[gy * g + gx] += p.0[0] as f64;
        counts[gy * g + gx] += 1;
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 / 255.0 } + 1e-3)
        .collect())
}

/// Bag-of-words hashed into `dim` buckets, plus a small bias.
pub fn hashed_text_embedding(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![1e-3; dim.max(1)];
    for tok in text.split_whitespace() {
        let d = Sha256::digest(tok.to_lowercase().as_bytes());
        let idx = u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) as usize % v.len();
        v[idx] += 1.0;
    }
    v
}
