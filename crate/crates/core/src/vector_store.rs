//! Flat exact-scan cosine index over train-split exemplar embeddings.
//!
//! # File layout
//!
//! ```text
//! "MWIX" version:u8('1')
//! manifest_len:u32le manifest:json
//! N x { id_len:u32le id:utf8  pid_len:u32le pid:utf8  D x f32le }
//! sha256(all preceding bytes):32
//! ```
//!
//! Report payloads and image references live in a sidecar JSONL file next
//! to the index, keyed by record id.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{SplitAssignment, SplitSide};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"MWIX";
pub const FORMAT_VERSION: u8 = b'1';
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum VectorError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero-norm vector")]
    ZeroVector,
    #[error("non-finite vector entry")]
    NonFinite,
    #[error("patient {0} belongs to the test split")]
    LeakageDetected(String),
    #[error("patient {0} has no split membership")]
    UnknownPatient(String),
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("corrupt index: {0}")]
    CorruptIndex(String),
    #[error("index format version {found} not supported (expected {expected})")]
    VersionMismatch { found: u8, expected: u8 },
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// Dense embedding with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector<T: Scalar> {
    values: Vec<T>,
}

impl<T: Scalar> EmbeddingVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self, VectorError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(VectorError::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> T {
        self.values.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt()
    }

    /// Widen or narrow to another scalar type.
    pub fn cast<U: Scalar>(&self) -> EmbeddingVector<U> {
        EmbeddingVector {
            values: self
                .values
                .iter()
                .map(|v| U::from_f64(v.to_f64_lossy()).unwrap_or_else(U::zero))
                .collect(),
        }
    }

    /// Element-wise mean of two vectors of equal dimension.
    pub fn mean_with(&self, other: &Self) -> Result<Self, VectorError> {
        if self.dim() != other.dim() {
            return Err(VectorError::DimensionMismatch {
                left: self.dim(),
                right: other.dim(),
            });
        }
        let two = T::one() + T::one();
        Ok(Self {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| (a + b) / two)
                .collect(),
        })
    }
}

/// Cosine similarity `dot(a, b) / (|a| |b|)`, clamped to [-1, 1].
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T, VectorError> {
    if a.len() != b.len() {
        return Err(VectorError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let mut dot = T::zero();
    let mut na = T::zero();
    let mut nb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + x * y;
        na = na + x * x;
        nb = nb + y * y;
    }
    if na <= T::zero() || nb <= T::zero() {
        return Err(VectorError::ZeroVector);
    }
    let sim = dot / (na.sqrt() * nb.sqrt());
    Ok(sim.max(-T::one()).min(T::one()))
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// One stored exemplar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub record_id: String,
    pub patient_id: String,
    pub vector: EmbeddingVector<f32>,
    /// Reference report as JSON text.
    pub report_payload: String,
    pub image_ref: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub dimension: usize,
    pub count: usize,
    pub metric: String,
    pub source_split: String,
    pub provider_id: String,
    pub build_seed: u64,
    /// Set when the index was built from zero train records.
    #[serde(default)]
    pub empty_warning: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub k: usize,
    pub min_similarity: Option<f64>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 5,
            min_similarity: None,
        }
    }
}

impl RetrievalConfig {
    pub fn new(k: usize) -> Result<Self, VectorError> {
        if k == 0 {
            return Err(VectorError::InvalidK);
        }
        Ok(Self {
            k,
            min_similarity: None,
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BuildOptions {
    /// Drop test-split records instead of failing.
    pub filter_test_records: bool,
}

/// Immutable train-only index.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    manifest: IndexManifest,
    records: Vec<EmbeddingRecord>,
}

impl VectorIndex {
    pub fn build(
        records: Vec<EmbeddingRecord>,
        split: &SplitAssignment,
        provider_id: &str,
        options: BuildOptions,
    ) -> Result<Self, VectorError> {
        let mut kept = Vec::with_capacity(records.len());
        let mut dimension = None;
        for r in records {
            match split.side(&r.patient_id) {
                Some(SplitSide::Train) => {}
                Some(SplitSide::Test) if options.filter_test_records => continue,
                Some(SplitSide::Test) => return Err(VectorError::LeakageDetected(r.patient_id)),
                None => return Err(VectorError::UnknownPatient(r.patient_id)),
            }
            match dimension {
                None => dimension = Some(r.vector.dim()),
                Some(d) if d != r.vector.dim() => {
                    return Err(VectorError::DimensionMismatch {
                        left: d,
                        right: r.vector.dim(),
                    })
                }
                _ => {}
            }
            if r.vector.norm() <= 0.0 {
                return Err(VectorError::ZeroVector);
            }
            kept.push(r);
        }
        let mut seen = HashSet::new();
        for r in &kept {
            if !seen.insert(r.record_id.as_str()) {
                return Err(VectorError::CorruptIndex(format!("duplicate record id {}", r.record_id)));
            }
        }
        kept.sort_by(|a, b| a.record_id.cmp(&b.record_id));
        let manifest = IndexManifest {
            dimension: dimension.unwrap_or(0),
            count: kept.len(),
            metric: "cosine".to_string(),
            source_split: "train".to_string(),
            provider_id: provider_id.to_string(),
            build_seed: split.seed,
            empty_warning: kept.is_empty(),
        };
        Ok(Self {
            manifest,
            records: kept,
        })
    }

    pub fn manifest(&self) -> &IndexManifest {
        &self.manifest
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Top-k by cosine, descending; ties go to the smaller record id.
    pub fn top_k<T: Scalar>(
        &self,
        query: &EmbeddingVector<T>,
        cfg: &RetrievalConfig,
    ) -> Result<Vec<(&EmbeddingRecord, f64)>, VectorError> {
        if cfg.k == 0 {
            return Err(VectorError::InvalidK);
        }
        if self.records.is_empty() {
            return Err(VectorError::EmptyIndex);
        }
        if query.dim() != self.manifest.dimension {
            return Err(VectorError::DimensionMismatch {
                left: query.dim(),
                right: self.manifest.dimension,
            });
        }
        let q: Vec<f64> = query.cast::<f64>().values;
        let mut scored = self
            .records
            .iter()
            .map(|r| Ok((r, cosine(&q, &widen(r.vector.values()))?)))
            .collect::<Result<Vec<_>, VectorError>>()?;
        if let Some(min) = cfg.min_similarity {
            scored.retain(|(_, s)| *s >= min);
        }
        scored.sort_by(|(ra, sa), (rb, sb)| {
            sb.partial_cmp(sa)
                .expect("finite similarities")
                .then_with(|| ra.record_id.cmp(&rb.record_id))
        });
        scored.truncate(cfg.k);
        Ok(scored)
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".payloads.jsonl");
        path.with_file_name(name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.push(FORMAT_VERSION);
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        buf.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        buf.extend_from_slice(&manifest);
        for r in &self.records {
            for s in [&r.record_id, &r.patient_id] {
                buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
                buf.extend_from_slice(s.as_bytes());
            }
            for v in r.vector.values() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let checksum = Sha256::digest(&buf);
        buf.extend_from_slice(&checksum);
        buf
    }

    pub fn persist(&self, path: &Path) -> Result<(), VectorError> {
        let io = |p: &Path, e: std::io::Error| VectorError::Io {
            path: p.to_path_buf(),
            message: e.to_string(),
        };
        fs::write(path, self.to_bytes()).map_err(|e| io(path, e))?;
        let sidecar = Self::sidecar_path(path);
        let mut f = fs::File::create(&sidecar).map_err(|e| io(&sidecar, e))?;
        for r in &self.records {
            let line = serde_json::to_string(&SidecarEntry {
                record_id: r.record_id.clone(),
                report_payload: r.report_payload.clone(),
                image_ref: r.image_ref.clone(),
            })
            .expect("sidecar serializes");
            writeln!(f, "{line}").map_err(|e| io(&sidecar, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VectorError> {
        let bytes = fs::read(path).map_err(|e| VectorError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let sidecar = Self::sidecar_path(path);
        let text = fs::read_to_string(&sidecar).map_err(|e| VectorError::Io {
            path: sidecar.clone(),
            message: e.to_string(),
        })?;
        let mut payloads = std::collections::HashMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let entry: SidecarEntry = serde_json::from_str(line)
                .map_err(|e| VectorError::CorruptIndex(format!("sidecar line {}: {e}", i + 1)))?;
            payloads.insert(entry.record_id.clone(), entry);
        }
        Self::from_bytes(&bytes, |id| payloads.remove(id))
    }

    fn from_bytes(
        bytes: &[u8],
        mut payload: impl FnMut(&str) -> Option<SidecarEntry>,
    ) -> Result<Self, VectorError> {
        let corrupt = |m: &str| VectorError::CorruptIndex(m.to_string());
        if bytes.len() < MAGIC.len() + 1 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        if bytes[MAGIC.len()] != FORMAT_VERSION {
            return Err(VectorError::VersionMismatch {
                found: bytes[MAGIC.len()],
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < MAGIC.len() + 1 + 4 + CHECKSUM_LEN {
            return Err(corrupt("truncated"));
        }
        let (body, checksum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != checksum {
            return Err(corrupt("checksum mismatch"));
        }
        let mut cur = Cursor {
            buf: body,
            pos: MAGIC.len() + 1,
        };
        let manifest_len = cur.u32()? as usize;
        let manifest: IndexManifest = serde_json::from_slice(cur.take(manifest_len)?)
            .map_err(|e| VectorError::CorruptIndex(format!("manifest: {e}")))?;
        if manifest.source_split != "train" || manifest.metric != "cosine" {
            return Err(corrupt("manifest is not a train-split cosine index"));
        }
        let mut records = Vec::with_capacity(manifest.count);
        for _ in 0..manifest.count {
            let record_id = cur.string()?;
            let patient_id = cur.string()?;
            let raw = cur.take(manifest.dimension * 4)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let vector = EmbeddingVector::new(values).map_err(|_| corrupt("non-finite vector"))?;
            let entry = payload(&record_id)
                .ok_or_else(|| VectorError::CorruptIndex(format!("no payload for {record_id}")))?;
            records.push(EmbeddingRecord {
                record_id,
                patient_id,
                vector,
                report_payload: entry.report_payload,
                image_ref: entry.image_ref,
            });
        }
        if cur.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { manifest, records })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SidecarEntry {
    record_id: String,
    report_payload: String,
    image_ref: String,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], VectorError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| VectorError::CorruptIndex("truncated".to_string()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, VectorError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String, VectorError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| VectorError::CorruptIndex("invalid utf-8".to_string()))
    }
}
