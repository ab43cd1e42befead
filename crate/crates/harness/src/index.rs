//! Building and loading the retrieval index of train-split exemplars.

use std::path::Path;

use mammo_client::{EmbedPayload, EmbeddingClient};
use mammo_core::dataset::{SplitAssignment, SplitSide};
use mammo_core::imaging::ImagingConfig;
use mammo_core::vector_store::{BuildOptions, EmbeddingRecord, EmbeddingVector, IndexManifest, VectorIndex};

use crate::cases::{composite_png, load_for, PreparedDataset};
use crate::config::ExperimentConfig;
use crate::error::{HarnessError, PreflightKind};

fn to_f32(v: &[f64]) -> Result<EmbeddingVector<f32>, HarnessError> {
    Ok(EmbeddingVector::new(v.iter().map(|&x| x as f32).collect())?)
}

/// Embed every train-split case and persist the index at `rag.index_path`.
pub async fn build_index(cfg: &ExperimentConfig) -> Result<IndexManifest, HarnessError> {
    let index_path = cfg
        .rag
        .index_path
        .clone()
        .ok_or_else(|| HarnessError::Config("rag.index_path is required".into()))?;
    let emb_cfg = cfg
        .embedding_config()
        .ok_or_else(|| HarnessError::Config("rag.provider is required".into()))?;
    let client = EmbeddingClient::new(emb_cfg)?;
    let data = load_for(cfg)?;
    let imaging = ImagingConfig::new(cfg.dataset.image_side)?;
    let cache = cfg.cache_dir();
    let mut records = Vec::new();
    for case in data.side(SplitSide::Train) {
        let (path, png) = composite_png(case, &imaging, &cache)?;
        let emb = client.embed(EmbedPayload::Image(&png)).await?;
        records.push(EmbeddingRecord {
            record_id: case.case_id.clone(),
            patient_id: case.split_key.clone(),
            vector: to_f32(&emb.vector)?,
            report_payload: serde_json::to_string(&case.gold.to_report_json(&case.case_id)).expect("report serializes"),
            image_ref: path.to_string_lossy().into_owned(),
        });
    }
    let index = VectorIndex::build(records, &data.split, &cfg.rag.provider_id, BuildOptions::default())?;
    if let Some(parent) = index_path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    index.persist(&index_path)?;
    if index.manifest().empty_warning {
        tracing::warn!("index built from zero train records");
    }
    Ok(index.manifest().clone())
}

/// Load an index and check it is usable with this run's split and provider.
pub fn load_checked(path: &Path, split: &SplitAssignment, cfg: &ExperimentConfig) -> Result<VectorIndex, HarnessError> {
    if !path.exists() {
        return Err(HarnessError::preflight(
            PreflightKind::IndexMissing,
            format!("{} does not exist", path.display()),
        ));
    }
    let index = VectorIndex::load(path).map_err(|e| HarnessError::preflight(PreflightKind::IndexInvalid, e.to_string()))?;
    let m = index.manifest();
    if m.provider_id != cfg.rag.provider_id {
        return Err(HarnessError::preflight(
            PreflightKind::IndexInvalid,
            format!("index provider {} differs from configured {}", m.provider_id, cfg.rag.provider_id),
        ));
    }
    if m.dimension != cfg.rag.dimension && m.count > 0 {
        return Err(HarnessError::preflight(
            PreflightKind::IndexInvalid,
            format!("index dimension {} differs from configured {}", m.dimension, cfg.rag.dimension),
        ));
    }
    if let Some(r) = index.records().iter().find(|r| split.side(&r.patient_id) != Some(SplitSide::Train)) {
        return Err(HarnessError::preflight(
            PreflightKind::IndexLeakage,
            format!("index record {} belongs to patient {} outside the train split", r.record_id, r.patient_id),
        ));
    }
    Ok(index)
}

pub fn query_vector(v: &[f64]) -> Result<EmbeddingVector<f64>, HarnessError> {
    Ok(EmbeddingVector::new(v.to_vec())?)
}

pub fn train_count(data: &PreparedDataset) -> usize {
    data.side(SplitSide::Train).count()
}
