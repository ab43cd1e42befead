//! Core of the mammography report harness: dataset preparation, imaging,
//! prompt rendering, retrieval, response parsing and evaluation.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix the
//! common `f64` instantiations.

pub mod dataset;
pub mod evaluation;
pub mod imaging;
pub mod labels;
pub mod parser;
pub mod prompt;
pub mod results;
pub mod scalar;
pub mod vector_store;

pub use scalar::{Scalar, SplitRatio};

pub type ClassificationMetrics = evaluation::ClassificationMetrics<f64>;
pub type ClassificationMetricsF32 = evaluation::ClassificationMetrics<f32>;
pub type TextScores = evaluation::TextScores<f64>;
pub type TaskResult = evaluation::TaskResult<f64>;
pub type Prf = evaluation::Prf<f64>;
pub type EmbeddingVector = vector_store::EmbeddingVector<f64>;
pub type EmbeddingVectorF32 = vector_store::EmbeddingVector<f32>;
