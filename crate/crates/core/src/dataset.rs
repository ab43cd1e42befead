//! Metadata and report ingestion, patient-level label synthesis, and splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::labels::{
    Birads, Density, Finding, FindingFlags, Laterality, Suspicion, ViewCell, ViewKind,
    HEALTHY_SENTINEL,
};
use crate::parser;
use crate::scalar::SplitRatio;

/// Column names required in the metadata CSV.
pub const METADATA_COLUMNS: [&str; 7] = [
    "patient_id",
    "laterality",
    "view",
    "image_path",
    "density",
    "birads",
    "findings",
];

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum DatasetError {
    #[error("metadata file {0} is empty")]
    EmptyFile(PathBuf),
    #[error("metadata is missing required column {0:?}")]
    MissingColumn(String),
    #[error("row {row}: bad value {value:?} in column {column}")]
    BadLabelValue {
        row: usize,
        column: String,
        value: String,
    },
    #[error("patient {patient_id}: missing views {missing:?}")]
    IncompleteStudy {
        patient_id: String,
        missing: Vec<ViewCell>,
    },
    #[error("patient {patient_id}: duplicate {cell} view")]
    DuplicateView { patient_id: String, cell: ViewCell },
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("{0} has no paired file")]
    MissingPair(PathBuf),
    #[error("could not extract labels from {0}")]
    ExtractionFailure(PathBuf),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DatasetError {
    DatasetError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// One row of the metadata table: a single view of one breast.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub patient_id: String,
    pub laterality: Laterality,
    pub view: ViewKind,
    pub image_ref: PathBuf,
    pub density: Density,
    pub birads: Birads,
    pub findings: Vec<Finding>,
}

impl ViewRecord {
    pub fn cell(&self) -> ViewCell {
        ViewCell::new(self.laterality, self.view)
    }
}

/// A patient with exactly one record for each of the four view cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientStudy {
    pub patient_id: String,
    views: BTreeMap<ViewCell, ViewRecord>,
}

impl PatientStudy {
    pub fn view(&self, cell: ViewCell) -> &ViewRecord {
        &self.views[&cell]
    }

    pub fn views(&self) -> impl Iterator<Item = &ViewRecord> {
        ViewCell::READING_ORDER.iter().map(|c| &self.views[c])
    }

    /// Build a study from four records; the same checks as [`assemble_studies`].
    pub fn from_records(records: Vec<ViewRecord>) -> Result<Self, DatasetError> {
        let mut studies = assemble_studies(records);
        if let Some(err) = studies.problems.pop() {
            return Err(err);
        }
        match studies.studies.len() {
            1 => Ok(studies.studies.pop().unwrap()),
            _ => Err(DatasetError::DuplicateId(
                "records span several patients".to_string(),
            )),
        }
    }
}

/// Reference report synthesized from labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthReport {
    pub density_class: Density,
    pub density_text: String,
    pub birads_class: Birads,
    pub birads_text: String,
    pub findings_text: String,
    pub suspicion: Suspicion,
    pub flags: FindingFlags,
}

/// Output schema for references and exemplars, in the key order models are shown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportJson {
    pub image_id: String,
    pub breast_density: String,
    #[serde(rename = "BI-RADS")]
    pub birads: String,
    pub findings: String,
    pub suspicion: String,
}

impl GroundTruthReport {
    pub fn to_report_json(&self, image_id: &str) -> ReportJson {
        ReportJson {
            image_id: image_id.to_string(),
            breast_density: self.density_text.clone(),
            birads: self.birads_text.clone(),
            findings: self.findings_text.clone(),
            suspicion: self.suspicion.as_str().to_string(),
        }
    }

    /// Build a reference from labels and free-text fields; suspicion and flags are derived.
    pub fn from_parts(
        density_class: Density,
        density_text: String,
        birads_class: Birads,
        birads_text: String,
        findings_text: String,
    ) -> Self {
        let flags = parser::extract_flags(&findings_text);
        Self {
            density_class,
            density_text,
            birads_class,
            birads_text,
            suspicion: birads_class.suspicion(),
            findings_text,
            flags,
        }
    }
}

fn parse_findings_cell(cell: &str) -> Result<Vec<Finding>, String> {
    let mut out = Vec::new();
    for part in cell.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let lower = part.to_ascii_lowercase();
        if lower == "no finding" || lower == "no findings" {
            continue;
        }
        let f: Finding = part.parse()?;
        if !out.contains(&f) {
            out.push(f);
        }
    }
    Ok(out)
}

/// Rows that parsed and rows that did not.
#[derive(Debug, Default)]
pub struct MetadataLoad {
    pub records: Vec<ViewRecord>,
    pub rejected: Vec<DatasetError>,
}

/// Load metadata, collecting bad rows instead of failing on them.
pub fn load_vindr_metadata_lenient(path: &Path) -> Result<MetadataLoad, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    if text.trim().is_empty() {
        return Err(DatasetError::EmptyFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| io_err(path, e))?.clone();
    let mut index = BTreeMap::new();
    for col in METADATA_COLUMNS {
        let pos = headers
            .iter()
            .position(|h| h == col)
            .ok_or_else(|| DatasetError::MissingColumn(col.to_string()))?;
        index.insert(col, pos);
    }
    let base = path.parent().unwrap_or(Path::new("."));

    let mut load = MetadataLoad::default();
    for (i, row) in reader.records().enumerate() {
        // header is line 1
        let row_no = i + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                load.rejected.push(io_err(path, e));
                continue;
            }
        };
        let get = |col: &str| row.get(index[col]).unwrap_or("").to_string();
        match parse_row(row_no, &get, base) {
            Ok(r) => load.records.push(r),
            Err(e) => load.rejected.push(e),
        }
    }
    if load.records.is_empty() && load.rejected.is_empty() {
        return Err(DatasetError::EmptyFile(path.to_path_buf()));
    }
    Ok(load)
}

fn parse_row(
    row: usize,
    get: &dyn Fn(&str) -> String,
    base: &Path,
) -> Result<ViewRecord, DatasetError> {
    let bad = |column: &str, value: String| DatasetError::BadLabelValue {
        row,
        column: column.to_string(),
        value,
    };
    let patient_id = get("patient_id");
    if patient_id.is_empty() {
        return Err(bad("patient_id", patient_id));
    }
    let laterality = get("laterality");
    let laterality: Laterality = laterality.parse().map_err(|_| bad("laterality", laterality))?;
    let view = get("view");
    let view: ViewKind = view.parse().map_err(|_| bad("view", view))?;
    let density = get("density");
    let density: Density = density.parse().map_err(|_| bad("density", density))?;
    let birads = get("birads");
    let birads: Birads = birads.parse().map_err(|_| bad("birads", birads))?;
    let findings = get("findings");
    let findings = parse_findings_cell(&findings).map_err(|_| bad("findings", findings))?;
    let image_path = PathBuf::from(get("image_path"));
    let image_ref = if image_path.is_relative() {
        base.join(image_path)
    } else {
        image_path
    };
    Ok(ViewRecord {
        patient_id,
        laterality,
        view,
        image_ref,
        density,
        birads,
        findings,
    })
}

/// Load metadata, failing on the first bad row.
pub fn load_vindr_metadata(path: &Path) -> Result<Vec<ViewRecord>, DatasetError> {
    let mut load = load_vindr_metadata_lenient(path)?;
    if !load.rejected.is_empty() {
        return Err(load.rejected.remove(0));
    }
    Ok(load.records)
}

/// Complete studies and the patients that could not be assembled.
#[derive(Debug, Default)]
pub struct Assembled {
    pub studies: Vec<PatientStudy>,
    pub problems: Vec<DatasetError>,
}

/// Group view records into per-patient studies, sorted by patient id.
pub fn assemble_studies(records: Vec<ViewRecord>) -> Assembled {
    let mut by_patient: BTreeMap<String, Vec<ViewRecord>> = BTreeMap::new();
    for r in records {
        by_patient.entry(r.patient_id.clone()).or_default().push(r);
    }
    let mut out = Assembled::default();
    for (patient_id, recs) in by_patient {
        let mut views = BTreeMap::new();
        let mut duplicate = None;
        for r in recs {
            let cell = r.cell();
            if views.insert(cell, r).is_some() && duplicate.is_none() {
                duplicate = Some(cell);
            }
        }
        if let Some(cell) = duplicate {
            out.problems.push(DatasetError::DuplicateView { patient_id, cell });
            continue;
        }
        let missing: Vec<ViewCell> = ViewCell::READING_ORDER
            .into_iter()
            .filter(|c| !views.contains_key(c))
            .collect();
        if !missing.is_empty() {
            out.problems.push(DatasetError::IncompleteStudy { patient_id, missing });
            continue;
        }
        out.studies.push(PatientStudy { patient_id, views });
    }
    out
}

/// Patient-level BI-RADS (max over views) and density (densest view wins).
pub fn derive_patient_labels(study: &PatientStudy) -> (Birads, Density) {
    let birads = study.views().map(|v| v.birads).max().expect("four views");
    let density = study.views().map(|v| v.density).max().expect("four views");
    (birads, density)
}

/// Findings sentence: `<Finding> in <laterality> <view> view` clauses joined by `; `.
pub fn findings_sentence(study: &PatientStudy) -> String {
    let clauses: Vec<String> = study
        .views()
        .flat_map(|v| {
            let cell = v.cell();
            v.findings.iter().map(move |f| format!("{f} in {cell} view"))
        })
        .collect();
    if clauses.is_empty() {
        HEALTHY_SENTINEL.to_string()
    } else {
        clauses.join("; ")
    }
}

pub fn synthesize_report(study: &PatientStudy) -> GroundTruthReport {
    let (birads, density) = derive_patient_labels(study);
    let flags = FindingFlags::from_findings(study.views().flat_map(|v| v.findings.iter()));
    GroundTruthReport {
        density_class: density,
        density_text: density.report_text().to_string(),
        birads_class: birads,
        birads_text: birads.report_text().to_string(),
        findings_text: findings_sentence(study),
        suspicion: birads.suspicion(),
        flags,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitUnit {
    Patient,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSide {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub unit: SplitUnit,
    pub seed: u64,
    pub ratio: SplitRatio,
    pub membership: BTreeMap<String, SplitSide>,
}

impl SplitAssignment {
    pub fn side(&self, id: &str) -> Option<SplitSide> {
        self.membership.get(id).copied()
    }

    pub fn ids(&self, side: SplitSide) -> impl Iterator<Item = &str> {
        self.membership
            .iter()
            .filter(move |(_, s)| **s == side)
            .map(|(id, _)| id.as_str())
    }

    pub fn count(&self, side: SplitSide) -> usize {
        self.ids(side).count()
    }
}

/// Seeded train/test split; the first `floor(ratio * N)` shuffled ids go to train.
///
/// Ids are sorted before shuffling, so input order does not matter.
pub fn split(
    ids: &[String],
    unit: SplitUnit,
    ratio: SplitRatio,
    seed: u64,
) -> Result<SplitAssignment, DatasetError> {
    let mut sorted: Vec<&String> = ids.iter().collect();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(DatasetError::DuplicateId(w[0].clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let n_train = (ratio * SplitRatio::from_integer(sorted.len() as u64))
        .floor()
        .to_integer() as usize;
    let membership = sorted
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let side = if i < n_train { SplitSide::Train } else { SplitSide::Test };
            (id.clone(), side)
        })
        .collect();
    Ok(SplitAssignment {
        unit,
        seed,
        ratio,
        membership,
    })
}

/// One DMID image with the reference extracted from its report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DmidCase {
    pub image_id: String,
    pub image_ref: PathBuf,
    pub report: GroundTruthReport,
}

#[derive(Debug, Default)]
pub struct DmidLoad {
    pub cases: Vec<DmidCase>,
    pub rejected: Vec<DatasetError>,
}

fn line_containing(text: &str, pred: impl Fn(&str) -> bool) -> Option<String> {
    text.lines()
        .map(str::trim)
        .find(|l| pred(l))
        .map(str::to_string)
}

fn findings_section(text: &str) -> String {
    let lines: Vec<&str> = text.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        let trimmed = line.trim();
        let lower = trimmed.to_ascii_lowercase();
        if let Some(rest) = lower.strip_prefix("findings") {
            let rest = rest.trim_start();
            if let Some(after) = rest.strip_prefix(':').or_else(|| rest.strip_prefix('-')) {
                let offset = trimmed.len() - after.len();
                let mut sentence = trimmed[offset..].trim().to_string();
                if sentence.is_empty() {
                    sentence = lines
                        .get(i + 1)
                        .map(|l| l.trim().to_string())
                        .unwrap_or_default();
                }
                return sentence;
            }
        }
    }
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Extract a reference report from one DMID text report.
pub fn extract_dmid_report(text: &str) -> Option<GroundTruthReport> {
    let density = parser::normalize_density(text)?;
    let birads = parser::normalize_birads(text)?;
    let density_text = line_containing(text, |l| parser::normalize_density(l).is_some())
        .unwrap_or_else(|| density.report_text().to_string());
    let birads_text = line_containing(text, |l| parser::normalize_birads(l).is_some())
        .unwrap_or_else(|| birads.report_text().to_string());
    let mut findings = findings_section(text);
    if findings.is_empty() {
        findings = HEALTHY_SENTINEL.to_string();
    }
    Some(GroundTruthReport::from_parts(
        density,
        density_text,
        birads,
        birads_text,
        findings,
    ))
}

/// Load `<id>.png` + `<id>.txt` pairs from one directory, sorted by id.
pub fn load_dmid(report_dir: &Path) -> Result<DmidLoad, DatasetError> {
    let entries = fs::read_dir(report_dir).map_err(|e| io_err(report_dir, e))?;
    let mut images: BTreeSet<String> = BTreeSet::new();
    let mut reports: BTreeSet<String> = BTreeSet::new();
    for entry in entries {
        let path = entry.map_err(|e| io_err(report_dir, e))?.path();
        let (Some(stem), Some(ext)) = (path.file_stem(), path.extension()) else {
            continue;
        };
        let stem = stem.to_string_lossy().to_string();
        match ext.to_string_lossy().to_ascii_lowercase().as_str() {
            "png" => {
                images.insert(stem);
            }
            "txt" => {
                reports.insert(stem);
            }
            _ => {}
        }
    }
    let mut load = DmidLoad::default();
    for id in images.union(&reports) {
        let image_ref = report_dir.join(format!("{id}.png"));
        let report_path = report_dir.join(format!("{id}.txt"));
        if !images.contains(id) {
            load.rejected.push(DatasetError::MissingPair(report_path));
            continue;
        }
        if !reports.contains(id) {
            load.rejected.push(DatasetError::MissingPair(image_ref));
            continue;
        }
        let text = fs::read_to_string(&report_path).map_err(|e| io_err(&report_path, e))?;
        match extract_dmid_report(&text) {
            Some(report) => load.cases.push(DmidCase {
                image_id: id.clone(),
                image_ref,
                report,
            }),
            None => load.rejected.push(DatasetError::ExtractionFailure(report_path)),
        }
    }
    Ok(load)
}
