//! Experiment configuration: a TOML file of flat `key = value` sections,
//! overridable by CLI flags and `MW_ENDPOINT`.

use std::path::{Path, PathBuf};
use std::time::Duration;

use mammo_client::{ClientConfig, EmbeddingProviderConfig, RetryPolicy};
use mammo_core::prompt::PromptMode;
use mammo_core::scalar::{format_ratio, parse_ratio};
use mammo_core::SplitRatio;
use serde::{Deserialize, Serialize};

pub const ENDPOINT_ENV: &str = "MW_ENDPOINT";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("parsing {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Vindr,
    Dmid,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Vindr => "vindr",
            DatasetKind::Dmid => "dmid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// VinDr-style metadata CSV.
    #[serde(default)]
    pub metadata: Option<PathBuf>,
    /// Directory of `<id>.png` + `<id>.txt` pairs.
    #[serde(default)]
    pub report_dir: Option<PathBuf>,
    #[serde(default = "default_side")]
    pub image_side: u32,
    /// Composite cache; defaults to `<output_dir>/cache`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

fn default_side() -> u32 {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    #[serde(default = "default_endpoint")]
    pub generate: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_endpoint() -> String {
    "http://127.0.0.1:11434".to_string()
}
fn default_timeout_ms() -> u64 {
    120_000
}
fn default_attempts() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            generate: default_endpoint(),
            timeout_ms: default_timeout_ms(),
            max_attempts: default_attempts(),
            backoff_ms: default_backoff_ms(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RagConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub index_path: Option<PathBuf>,
    /// Embedding provider base URL.
    #[serde(default)]
    pub provider: Option<String>,
    #[serde(default = "default_provider_id")]
    pub provider_id: String,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    #[serde(default)]
    pub attach_exemplar_images: bool,
    /// Average the instruction's text embedding into the query vector.
    /// Index keys stay image-only.
    #[serde(default)]
    pub fuse_prompt_text: bool,
}

fn default_k() -> usize {
    5
}
fn default_provider_id() -> String {
    "mock-pool8".to_string()
}
fn default_dimension() -> usize {
    64
}

impl Default for RagConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            k: default_k(),
            index_path: None,
            provider: None,
            provider_id: default_provider_id(),
            dimension: default_dimension(),
            attach_exemplar_images: false,
            fuse_prompt_text: false,
        }
    }
}

/// Split ratio written as `"4/5"`, `"0.8"` or `0.8`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RatioValue {
    Text(String),
    Number(f64),
}

impl RatioValue {
    pub fn resolve(&self) -> Result<SplitRatio, ConfigError> {
        let text = match self {
            RatioValue::Text(t) => t.clone(),
            RatioValue::Number(x) => x.to_string(),
        };
        parse_ratio(&text).ok_or_else(|| ConfigError::Invalid(format!("split ratio {text:?} is not in [0, 1]")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "default_ratio")]
    pub ratio: RatioValue,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_ratio() -> RatioValue {
    RatioValue::Text("4/5".to_string())
}
fn default_seed() -> u64 {
    42
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratio: default_ratio(),
            seed: default_seed(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsConfig {
    #[serde(default)]
    pub max_cases: Option<usize>,
    #[serde(default)]
    pub concurrency: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    /// Directory with `zero_shot.txt`, `few_shot.txt`, `cot.txt`, `schema_block.txt`.
    #[serde(default)]
    pub template_dir: Option<PathBuf>,
    /// JSONL of five few-shot exemplars.
    #[serde(default)]
    pub exemplars: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub max_tokens: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub output_dir: PathBuf,
    pub model_name: String,
    pub prompt_mode: String,
    /// Fixed timestamp and zero latency in records, for reproducible files.
    #[serde(default)]
    pub frozen_time: bool,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub endpoint: EndpointConfig,
    #[serde(default)]
    pub rag: RagConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub limits: LimitsConfig,
    #[serde(default)]
    pub prompt: PromptConfig,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl ExperimentConfig {
    /// Read a config file; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
        resolve(base, &mut self.dataset.metadata);
        resolve(base, &mut self.dataset.report_dir);
        resolve(base, &mut self.dataset.cache_dir);
        resolve(base, &mut self.rag.index_path);
        resolve(base, &mut self.prompt.template_dir);
        resolve(base, &mut self.prompt.exemplars);
    }

    /// Apply `MW_ENDPOINT` when set and non-empty.
    pub fn apply_env(&mut self) {
        if let Ok(url) = std::env::var(ENDPOINT_ENV) {
            if !url.trim().is_empty() {
                self.endpoint.generate = url.trim().to_string();
            }
        }
    }

    pub fn mode(&self) -> Result<PromptMode, ConfigError> {
        self.prompt_mode.parse().map_err(|e: mammo_core::prompt::PromptError| ConfigError::Invalid(e.to_string()))
    }

    pub fn rag_enabled(&self) -> bool {
        self.rag.enabled || matches!(self.mode(), Ok(PromptMode::RagFewShot))
    }

    pub fn split_ratio(&self) -> Result<SplitRatio, ConfigError> {
        self.split.ratio.resolve()
    }

    pub fn concurrency(&self) -> usize {
        self.limits.concurrency.unwrap_or(1).max(1)
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.dataset.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("cache"))
    }

    pub fn results_path(&self) -> PathBuf {
        self.output_dir.join(format!("{}.jsonl", self.run_id))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return invalid("run_id must be a non-empty file name");
        }
        if self.model_name.is_empty() {
            return invalid("model_name is empty");
        }
        let mode = self.mode()?;
        self.split_ratio()?;
        if self.dataset.image_side == 0 {
            return invalid("dataset.image_side must be positive");
        }
        match self.dataset.kind {
            DatasetKind::Vindr if self.dataset.metadata.is_none() => return invalid("dataset.metadata is required for vindr"),
            DatasetKind::Dmid if self.dataset.report_dir.is_none() => return invalid("dataset.report_dir is required for dmid"),
            _ => {}
        }
        if self.rag.enabled && mode != PromptMode::RagFewShot {
            return invalid("rag.enabled requires prompt_mode = \"rag\"");
        }
        if self.rag_enabled() {
            if self.rag.index_path.is_none() || self.rag.provider.is_none() {
                return invalid("RAG needs rag.index_path and rag.provider");
            }
            if !(1..=mammo_core::prompt::MAX_RETRIEVED).contains(&self.rag.k) {
                return invalid("rag.k must be between 1 and 5");
            }
        }
        if self.limits.concurrency == Some(0) {
            return invalid("limits.concurrency must be at least 1");
        }
        Ok(())
    }

    pub fn client_config(&self) -> ClientConfig {
        let mut c = ClientConfig::new(self.endpoint.generate.clone());
        c.timeout = Duration::from_millis(self.endpoint.timeout_ms);
        c.retry = self.retry_policy();
        c.concurrency = self.concurrency();
        c
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.endpoint.max_attempts.max(1),
            base_backoff: Duration::from_millis(self.endpoint.backoff_ms),
            max_backoff: Duration::from_millis(self.endpoint.backoff_ms.saturating_mul(16)),
        }
    }

    pub fn embedding_config(&self) -> Option<EmbeddingProviderConfig> {
        let endpoint = self.rag.provider.clone()?;
        let mut c = EmbeddingProviderConfig::new(endpoint, self.rag.provider_id.clone(), self.rag.dimension);
        c.retry = self.retry_policy();
        Some(c)
    }

    /// Snapshot for the results header; limits are excluded so resumed
    /// runs with different batch sizes keep the same header.
    pub fn snapshot(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("limits");
            obj.remove("output_dir");
            if let Some(ds) = obj.get_mut("dataset").and_then(|d| d.as_object_mut()) {
                ds.remove("cache_dir");
            }
        }
        if let Ok(r) = self.split_ratio() {
            v["split"]["ratio"] = serde_json::Value::String(format_ratio(&r));
        }
        v
    }
}
