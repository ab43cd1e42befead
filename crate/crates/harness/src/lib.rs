//! Experiment harness: dataset loading, RAG index builds, resumable runs
//! against a model server, and metric tables.

pub mod cases;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod index;
pub mod rebalance;
pub mod run;

pub use config::ExperimentConfig;
pub use error::{HarnessError, PreflightKind};
