//! Turning a dataset on disk into evaluation cases and cached composites.

use std::fs;
use std::path::{Path, PathBuf};

use mammo_core::dataset::{
    assemble_studies, load_dmid, load_vindr_metadata_lenient, split, synthesize_report, GroundTruthReport,
    PatientStudy, SplitAssignment, SplitSide, SplitUnit,
};
use mammo_core::imaging::{compose_four_view, resize_square, ImagingConfig, RasterImage};
use mammo_core::labels::{Laterality, ViewCell, ViewKind};
use mammo_core::prompt::ViewLayout;
use mammo_core::SplitRatio;

use crate::config::{DatasetConfig, DatasetKind, ExperimentConfig};
use crate::error::HarnessError;

#[derive(Debug, Clone)]
pub enum CaseSource {
    Study(PatientStudy),
    Single(PathBuf),
}

#[derive(Debug, Clone)]
pub struct Case {
    pub case_id: String,
    /// Unit used for the split (patient for four-view studies, image otherwise).
    pub split_key: String,
    pub gold: GroundTruthReport,
    pub source: CaseSource,
}

impl Case {
    pub fn layout(&self) -> ViewLayout {
        match self.source {
            CaseSource::Study(_) => ViewLayout::FourView,
            CaseSource::Single(_) => ViewLayout::SingleView,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub kind: DatasetKind,
    /// Sorted by case id.
    pub cases: Vec<Case>,
    pub split: SplitAssignment,
    /// Rows, studies or report pairs that could not be used.
    pub rejected: Vec<String>,
}

impl PreparedDataset {
    pub fn side(&self, side: SplitSide) -> impl Iterator<Item = &Case> {
        self.cases
            .iter()
            .filter(move |c| self.split.side(&c.split_key) == Some(side))
    }
}

pub fn load_dataset(ds: &DatasetConfig, ratio: SplitRatio, seed: u64) -> Result<PreparedDataset, HarnessError> {
    let mut rejected = Vec::new();
    let (cases, unit) = match ds.kind {
        DatasetKind::Vindr => {
            let path = ds.metadata.as_ref().ok_or_else(|| HarnessError::Config("dataset.metadata missing".into()))?;
            let load = load_vindr_metadata_lenient(path)?;
            rejected.extend(load.rejected.iter().map(|e| e.to_string()));
            let assembled = assemble_studies(load.records);
            rejected.extend(assembled.problems.iter().map(|e| e.to_string()));
            let cases = assembled
                .studies
                .into_iter()
                .map(|s| Case {
                    case_id: s.patient_id.clone(),
                    split_key: s.patient_id.clone(),
                    gold: synthesize_report(&s),
                    source: CaseSource::Study(s),
                })
                .collect::<Vec<_>>();
            (cases, SplitUnit::Patient)
        }
        DatasetKind::Dmid => {
            let dir = ds.report_dir.as_ref().ok_or_else(|| HarnessError::Config("dataset.report_dir missing".into()))?;
            let load = load_dmid(dir)?;
            rejected.extend(load.rejected.iter().map(|e| e.to_string()));
            let cases = load
                .cases
                .into_iter()
                .map(|c| Case {
                    case_id: c.image_id.clone(),
                    split_key: c.image_id,
                    gold: c.report,
                    source: CaseSource::Single(c.image_ref),
                })
                .collect::<Vec<_>>();
            (cases, SplitUnit::Image)
        }
    };
    let mut cases = cases;
    cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let keys: Vec<String> = cases.iter().map(|c| c.split_key.clone()).collect();
    let split = split(&keys, unit, ratio, seed)?;
    Ok(PreparedDataset {
        kind: ds.kind,
        cases,
        split,
        rejected,
    })
}

pub fn load_for(cfg: &ExperimentConfig) -> Result<PreparedDataset, HarnessError> {
    load_dataset(&cfg.dataset, cfg.split_ratio()?, cfg.split.seed)
}

/// Cache location: `<cache_dir>/<imaging digest>/<case_id>.png`.
pub fn composite_path(cache_dir: &Path, imaging: &ImagingConfig, case_id: &str) -> PathBuf {
    cache_dir.join(&imaging.digest()[..16]).join(format!("{case_id}.png"))
}

fn build_composite(case: &Case, imaging: &ImagingConfig) -> Result<RasterImage, HarnessError> {
    match &case.source {
        CaseSource::Study(study) => {
            let tile = |lat, view| -> Result<RasterImage, HarnessError> {
                let rec = study.view(ViewCell::new(lat, view));
                Ok(resize_square(&RasterImage::open(&rec.image_ref)?, imaging)?)
            };
            Ok(compose_four_view(
                &tile(Laterality::Right, ViewKind::CC)?,
                &tile(Laterality::Left, ViewKind::CC)?,
                &tile(Laterality::Right, ViewKind::MLO)?,
                &tile(Laterality::Left, ViewKind::MLO)?,
            )?)
        }
        CaseSource::Single(path) => Ok(resize_square(&RasterImage::open(path)?, imaging)?),
    }
}

/// PNG bytes of a case's model input, computed once per imaging configuration.
pub fn composite_png(case: &Case, imaging: &ImagingConfig, cache_dir: &Path) -> Result<(PathBuf, Vec<u8>), HarnessError> {
    let path = composite_path(cache_dir, imaging, &case.case_id);
    if let Ok(bytes) = fs::read(&path) {
        return Ok((path, bytes));
    }
    let png = build_composite(case, imaging)?.to_png_bytes()?;
    let parent = path.parent().expect("cache path has a parent");
    fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    // Write then rename so concurrent readers never see a partial file.
    let tmp = path.with_extension(format!("png.{}.tmp", std::process::id()));
    fs::write(&tmp, &png).map_err(|e| HarnessError::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| HarnessError::io(&path, e))?;
    Ok((path, png))
}
