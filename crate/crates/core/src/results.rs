//! Results JSONL: an optional provenance header line followed by one
//! [`RunRecord`] per case.
//!
//! Any producer (the run loop, an external fine-tuning pipeline) can write
//! this format; [`validate_results`] checks a file without evaluating it.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::dataset::GroundTruthReport;
use crate::parser::{ParseStatus, ParsedReport};

pub const PROVENANCE_TYPE: &str = "provenance";

/// Failure talking to the model for one case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseError {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub case_id: String,
    pub prompt_mode: String,
    pub model: String,
    #[serde(default)]
    pub rag: bool,
    #[serde(default)]
    pub exemplar_ids: Vec<String>,
    pub raw_output: String,
    pub parsed: ParsedReport,
    pub gold: GroundTruthReport,
    pub latency_ms: u64,
    pub template_digest: String,
    pub timestamp: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<CaseError>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub unit: String,
    pub ratio: String,
    pub seed: u64,
}

/// First line of a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunProvenance {
    pub record_type: String,
    pub run_id: String,
    pub created: String,
    pub model: String,
    pub prompt_mode: String,
    pub rag: bool,
    pub dataset_kind: String,
    pub split: SplitInfo,
    pub template_digest: String,
    #[serde(default)]
    pub imaging_digest: Option<String>,
    #[serde(default)]
    pub index_manifest: Option<serde_json::Value>,
    /// Free-form snapshot of the configuration in force.
    #[serde(default)]
    pub config: serde_json::Value,
    pub tool_version: String,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ResultsError {
    #[error("line {line}: corrupt results: {message}")]
    CorruptResults { line: usize, message: String },
    #[error("line {line}: provenance header must be the first line")]
    MisplacedProvenance { line: usize },
    #[error("line {line}: duplicate case {case_id}")]
    DuplicateCase { line: usize, case_id: String },
    #[error("line {line}: run id {found} differs from header {expected}")]
    RunIdMismatch { line: usize, expected: String, found: String },
    #[error("line {line}: template digest {found} differs from header {expected}")]
    DigestMismatch { line: usize, expected: String, found: String },
    #[error("line {line}: {message}")]
    Inconsistent { line: usize, message: String },
}

impl ResultsError {
    pub fn line(&self) -> usize {
        match self {
            ResultsError::CorruptResults { line, .. }
            | ResultsError::MisplacedProvenance { line }
            | ResultsError::DuplicateCase { line, .. }
            | ResultsError::RunIdMismatch { line, .. }
            | ResultsError::DigestMismatch { line, .. }
            | ResultsError::Inconsistent { line, .. } => *line,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultsFile {
    pub provenance: Option<RunProvenance>,
    pub records: Vec<RunRecord>,
}

#[derive(Debug)]
enum Line {
    Provenance(RunProvenance),
    Record(Box<RunRecord>),
}

fn parse_line(line_no: usize, text: &str) -> Result<Line, ResultsError> {
    let corrupt = |message: String| ResultsError::CorruptResults { line: line_no, message };
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| corrupt(e.to_string()))?;
    if value.get("record_type").and_then(|v| v.as_str()) == Some(PROVENANCE_TYPE) {
        serde_json::from_value(value).map(Line::Provenance).map_err(|e| corrupt(e.to_string()))
    } else {
        serde_json::from_value(value)
            .map(|r| Line::Record(Box::new(r)))
            .map_err(|e| corrupt(e.to_string()))
    }
}

/// Parse a results file. Every line, including the last, must be complete JSON.
pub fn parse_results(text: &str) -> Result<ResultsFile, ResultsError> {
    let mut out = ResultsFile::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line_no, line)? {
            Line::Provenance(p) if line_no == 1 => out.provenance = Some(p),
            Line::Provenance(_) => return Err(ResultsError::MisplacedProvenance { line: line_no }),
            Line::Record(r) => out.records.push(*r),
        }
    }
    Ok(out)
}

/// Split off an unterminated trailing line left by an interrupted writer.
/// Returns the byte length of the intact prefix.
pub fn intact_prefix_len(text: &str) -> usize {
    if text.is_empty() || text.ends_with('\n') {
        text.len()
    } else {
        text.rfind('\n').map_or(0, |i| i + 1)
    }
}

fn check_record(line: usize, rec: &RunRecord) -> Vec<ResultsError> {
    let mut errors = Vec::new();
    let p = &rec.parsed;
    let present = [
        p.density_class.is_some(),
        p.birads_class.is_some(),
        p.suspicion.is_some(),
        p.findings_text.is_some(),
    ];
    let expected = match present.iter().filter(|b| **b).count() {
        4 => ParseStatus::Parsed,
        0 => ParseStatus::ParseFailure,
        _ => ParseStatus::PartialParse,
    };
    if p.status != expected {
        errors.push(ResultsError::Inconsistent {
            line,
            message: format!("parse status {:?} but {} of 4 fields present", p.status, present.iter().filter(|b| **b).count()),
        });
    }
    if p.findings_text.is_some() != p.flags.is_some() {
        errors.push(ResultsError::Inconsistent {
            line,
            message: "flags must be present exactly when findings text is".to_string(),
        });
    }
    if rec.gold.suspicion != rec.gold.birads_class.suspicion() {
        errors.push(ResultsError::Inconsistent {
            line,
            message: "gold suspicion does not follow from gold BI-RADS".to_string(),
        });
    }
    if rec.case_id.is_empty() || rec.run_id.is_empty() {
        errors.push(ResultsError::Inconsistent {
            line,
            message: "empty run_id or case_id".to_string(),
        });
    }
    errors
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub has_provenance: bool,
    pub records: usize,
    pub errors: Vec<ResultsError>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Check schema and cross-record invariants, collecting every problem.
pub fn validate_results(text: &str) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut header: Option<RunProvenance> = None;
    let mut first_run: Option<String> = None;
    let mut seen = HashSet::new();
    if !text.is_empty() && !text.ends_with('\n') {
        report.errors.push(ResultsError::CorruptResults {
            line: text.lines().count(),
            message: "unterminated final line".to_string(),
        });
    }
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec = match parse_line(line_no, line) {
            Ok(Line::Provenance(p)) if line_no == 1 => {
                report.has_provenance = true;
                header = Some(p);
                continue;
            }
            Ok(Line::Provenance(_)) => {
                report.errors.push(ResultsError::MisplacedProvenance { line: line_no });
                continue;
            }
            Ok(Line::Record(r)) => r,
            Err(e) => {
                report.errors.push(e);
                continue;
            }
        };
        report.records += 1;
        let expected_run = header.as_ref().map(|h| h.run_id.clone()).or_else(|| first_run.clone());
        match expected_run {
            Some(expected) if expected != rec.run_id => report.errors.push(ResultsError::RunIdMismatch {
                line: line_no,
                expected,
                found: rec.run_id.clone(),
            }),
            None => first_run = Some(rec.run_id.clone()),
            _ => {}
        }
        if let Some(h) = &header {
            if h.template_digest != rec.template_digest {
                report.errors.push(ResultsError::DigestMismatch {
                    line: line_no,
                    expected: h.template_digest.clone(),
                    found: rec.template_digest.clone(),
                });
            }
        }
        if !seen.insert(rec.case_id.clone()) {
            report.errors.push(ResultsError::DuplicateCase {
                line: line_no,
                case_id: rec.case_id.clone(),
            });
        }
        report.errors.extend(check_record(line_no, &rec));
    }
    report
}
