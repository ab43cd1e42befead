use std::path::{Path, PathBuf};

use mammo_client::ClientError;
use mammo_core::dataset::DatasetError;
use mammo_core::evaluation::EvalError;
use mammo_core::imaging::ImagingError;
use mammo_core::prompt::PromptError;
use mammo_core::results::ResultsError;
use mammo_core::vector_store::VectorError;

use crate::config::ConfigError;

/// Why a run refused to start.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PreflightKind {
    ServerUnreachable,
    ModelMissing,
    DatasetUnloadable,
    IndexMissing,
    IndexInvalid,
    IndexLeakage,
    ProviderUnreachable,
    TemplateInvalid,
    ResultsConflict,
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("preflight failed ({kind:?}): {detail}")]
    PreflightFailure { kind: PreflightKind, detail: String },
    #[error("template changed since this run started: file has {recorded}, current is {current}")]
    TemplateDrift { recorded: String, current: String },
    #[error("runs were made on different splits: {0}")]
    SplitMismatch(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Results(#[from] ResultsError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl HarnessError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }

    pub fn preflight(kind: PreflightKind, detail: impl Into<String>) -> Self {
        HarnessError::PreflightFailure {
            kind,
            detail: detail.into(),
        }
    }

    pub fn preflight_kind(&self) -> Option<&PreflightKind> {
        match self {
            HarnessError::PreflightFailure { kind, .. } => Some(kind),
            _ => None,
        }
    }
}

impl From<ConfigError> for HarnessError {
    fn from(e: ConfigError) -> Self {
        HarnessError::Config(e.to_string())
    }
}
