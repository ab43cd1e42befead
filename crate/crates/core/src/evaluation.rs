//! Classification metrics, ROUGE-L and greedy BERTScore.
//!
//! Outputs that could not be parsed land in a per-gold-class "unparsed"
//! bucket: they count as false negatives for their gold class and never as a
//! prediction for any class.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::labels::{Birads, Density, Suspicion};
use crate::results::RunRecord;
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("label {0:?} is not in the class list")]
    UnknownLabel(String),
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("confusion matrices have different classes")]
    ClassMismatch,
    #[error("records from several experiments: {0:?}")]
    MixedExperiments(Vec<String>),
    #[error("token embedder failed: {0}")]
    EmbedderFailure(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: Vec<String>,
    /// rows = gold, columns = prediction
    counts: Vec<Vec<u64>>,
    unparsed: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new<S: Into<String>>(classes: impl IntoIterator<Item = S>) -> Self {
        let classes: Vec<String> = classes.into_iter().map(Into::into).collect();
        let k = classes.len();
        Self {
            classes,
            counts: vec![vec![0; k]; k],
            unparsed: vec![0; k],
        }
    }

    /// Build directly from counts; `counts` must be square and match `classes`.
    pub fn from_counts(classes: Vec<String>, counts: Vec<Vec<u64>>, unparsed: Vec<u64>) -> Option<Self> {
        let k = classes.len();
        if counts.len() != k || unparsed.len() != k || counts.iter().any(|r| r.len() != k) {
            return None;
        }
        Some(Self {
            classes,
            counts,
            unparsed,
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn unparsed(&self) -> &[u64] {
        &self.unparsed
    }

    fn index(&self, label: &str) -> Result<usize, EvalError> {
        self.classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| EvalError::UnknownLabel(label.to_string()))
    }

    pub fn update(&mut self, gold: &str, pred: Option<&str>) -> Result<(), EvalError> {
        let g = self.index(gold)?;
        match pred {
            Some(p) => {
                let p = self.index(p)?;
                self.counts[g][p] += 1;
            }
            None => self.unparsed[g] += 1,
        }
        Ok(())
    }

    /// Cell-wise sum of two matrices over the same classes.
    pub fn merge(&self, other: &Self) -> Result<Self, EvalError> {
        if self.classes != other.classes {
            return Err(EvalError::ClassMismatch);
        }
        let mut out = self.clone();
        for (row, orow) in out.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
        for (u, o) in out.unparsed.iter_mut().zip(&other.unparsed) {
            *u += o;
        }
        Ok(out)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum::<u64>() + self.unparsed_total()
    }

    pub fn unparsed_total(&self) -> u64 {
        self.unparsed.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }
}

/// Sum of shard matrices; equal to updating one matrix sequentially.
pub fn merge_all(parts: &[ConfusionMatrix]) -> Result<ConfusionMatrix, EvalError> {
    let (first, rest) = parts.split_first().ok_or(EvalError::EmptyMatrix)?;
    rest.iter().try_fold(first.clone(), |acc, m| acc.merge(m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics<T> {
    pub class: String,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub precision: T,
    pub recall: T,
    pub f1: T,
    pub specificity: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics<T> {
    pub micro_accuracy: T,
    pub micro_recall: T,
    pub macro_precision: T,
    pub macro_recall: T,
    pub macro_f1: T,
    pub macro_specificity: T,
    pub per_class: Vec<ClassMetrics<T>>,
    /// `metric:class` entries whose denominator was zero and were set to 0.
    pub degenerate: Vec<String>,
    pub unparsed: u64,
    pub n: u64,
}

fn ratio<T: Scalar>(num: u64, den: u64, what: &str, class: &str, degenerate: &mut Vec<String>) -> T {
    if den == 0 {
        degenerate.push(format!("{what}:{class}"));
        T::zero()
    } else {
        T::from_count(num as usize) / T::from_count(den as usize)
    }
}

fn mean<T: Scalar>(values: impl Iterator<Item = T>) -> T {
    let mut sum = T::zero();
    let mut n = 0usize;
    for v in values {
        sum = sum + v;
        n += 1;
    }
    if n == 0 {
        T::zero()
    } else {
        sum / T::from_count(n)
    }
}

pub fn compute<T: Scalar>(cm: &ConfusionMatrix) -> Result<ClassificationMetrics<T>, EvalError> {
    let total = cm.total();
    if total == 0 || cm.classes.is_empty() {
        return Err(EvalError::EmptyMatrix);
    }
    let k = cm.classes.len();
    let mut degenerate = Vec::new();
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let name = &cm.classes[c];
        let tp = cm.counts[c][c];
        let fp: u64 = (0..k).filter(|&g| g != c).map(|g| cm.counts[g][c]).sum();
        let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| cm.counts[c][p]).sum::<u64>() + cm.unparsed[c];
        let tn = total - tp - fp - fn_;
        let precision: T = ratio(tp, tp + fp, "precision", name, &mut degenerate);
        let recall: T = ratio(tp, tp + fn_, "recall", name, &mut degenerate);
        let f1 = if precision + recall > T::zero() {
            (T::one() + T::one()) * precision * recall / (precision + recall)
        } else {
            T::zero()
        };
        let specificity: T = ratio(tn, tn + fp, "specificity", name, &mut degenerate);
        per_class.push(ClassMetrics {
            class: name.clone(),
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
            specificity,
        });
    }
    let trace = cm.trace();
    let tp_fn: u64 = per_class.iter().map(|m| m.tp + m.fn_).sum();
    Ok(ClassificationMetrics {
        micro_accuracy: T::from_count(trace as usize) / T::from_count(total as usize),
        micro_recall: T::from_count(trace as usize) / T::from_count(tp_fn as usize),
        macro_precision: mean(per_class.iter().map(|m| m.precision)),
        macro_recall: mean(per_class.iter().map(|m| m.recall)),
        macro_f1: mean(per_class.iter().map(|m| m.f1)),
        macro_specificity: mean(per_class.iter().map(|m| m.specificity)),
        per_class,
        degenerate,
        unparsed: cm.unparsed_total(),
        n: total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf<T> {
    pub precision: T,
    pub recall: T,
    pub f: T,
}

impl<T: Scalar> Prf<T> {
    fn zero() -> Self {
        Self {
            precision: T::zero(),
            recall: T::zero(),
            f: T::zero(),
        }
    }

    fn from_pr(precision: T, recall: T) -> Self {
        let f = if precision + recall > T::zero() {
            (T::one() + T::one()) * precision * recall / (precision + recall)
        } else {
            T::zero()
        };
        Self { precision, recall, f }
    }
}

/// Lowercase, split on whitespace, strip ASCII punctuation from token edges.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

pub fn lcs_len<A: PartialEq>(a: &[A], b: &[A]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Scalar>(candidate: &str, reference: &str) -> Prf<T> {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    match (c.is_empty(), r.is_empty()) {
        (true, true) => {
            return Prf {
                precision: T::one(),
                recall: T::one(),
                f: T::one(),
            }
        }
        (true, false) | (false, true) => return Prf::zero(),
        _ => {}
    }
    let l = lcs_len(&c, &r);
    if l == 0 {
        return Prf::zero();
    }
    Prf::from_pr(
        T::from_count(l) / T::from_count(c.len()),
        T::from_count(l) / T::from_count(r.len()),
    )
}

/// One vector per token.
pub trait TokenEmbedder<T: Scalar> {
    fn embed_tokens(&self, tokens: &[String]) -> Result<Vec<Vec<T>>, EvalError>;
}

/// Character n-gram hashing embedder.
///
/// Each token is wrapped as `#token#`; every character n-gram is hashed with
/// 64-bit FNV-1a and counted into bucket `hash % dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedNgramEmbedder {
    pub dim: usize,
    pub n: usize,
}

impl Default for HashedNgramEmbedder {
    fn default() -> Self {
        Self { dim: 64, n: 3 }
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl<T: Scalar> TokenEmbedder<T> for HashedNgramEmbedder {
    fn embed_tokens(&self, tokens: &[String]) -> Result<Vec<Vec<T>>, EvalError> {
        if self.dim == 0 || self.n == 0 {
            return Err(EvalError::EmbedderFailure("dim and n must be positive".to_string()));
        }
        Ok(tokens
            .iter()
            .map(|tok| {
                let chars: Vec<char> = format!("#{tok}#").chars().collect();
                let mut v = vec![T::zero(); self.dim];
                let n = self.n.min(chars.len());
                for w in chars.windows(n) {
                    let gram: String = w.iter().collect();
                    let idx = (fnv1a64(gram.as_bytes()) % self.dim as u64) as usize;
                    v[idx] = v[idx] + T::one();
                }
                v
            })
            .collect())
    }
}

fn token_cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut dot = T::zero();
    let mut na = T::zero();
    let mut nb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + x * y;
        na = na + x * x;
        nb = nb + y * y;
    }
    if na <= T::zero() || nb <= T::zero() {
        T::zero()
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

fn clamp01<T: Scalar>(x: T) -> T {
    x.max(T::zero()).min(T::one())
}

/// Greedy max-cosine matching, no IDF weighting, no baseline rescaling.
pub fn bert_score<T: Scalar, E: TokenEmbedder<T> + ?Sized>(
    candidate: &str,
    reference: &str,
    embedder: &E,
) -> Result<Prf<T>, EvalError> {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() || r.is_empty() {
        return Ok(Prf::zero());
    }
    let ce = embedder.embed_tokens(&c)?;
    let re = embedder.embed_tokens(&r)?;
    if ce.len() != c.len() || re.len() != r.len() {
        return Err(EvalError::EmbedderFailure("embedder returned wrong number of vectors".to_string()));
    }
    let best = |from: &[Vec<T>], to: &[Vec<T>]| {
        mean(from.iter().map(|x| {
            to.iter()
                .map(|y| token_cosine(x, y))
                .fold(T::neg_infinity(), T::max)
        }))
    };
    let precision = clamp01(best(&ce, &re));
    let recall = clamp01(best(&re, &ce));
    Ok(Prf::from_pr(precision, recall))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextScores<T> {
    pub rouge_l: Prf<T>,
    pub bert_score: Prf<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "BI-RADS")]
    Birads,
    Density,
    Suspicion,
    Mass,
    Calcification,
    Asymmetry,
    BiradsText,
    DensityText,
    FindingsText,
}

impl Task {
    pub const ALL: [Task; 9] = [
        Task::Birads,
        Task::Density,
        Task::Suspicion,
        Task::Mass,
        Task::Calcification,
        Task::Asymmetry,
        Task::BiradsText,
        Task::DensityText,
        Task::FindingsText,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Birads => "BI-RADS",
            Task::Density => "Density",
            Task::Suspicion => "Suspicion",
            Task::Mass => "Mass",
            Task::Calcification => "Calcification",
            Task::Asymmetry => "Asymmetry",
            Task::BiradsText => "BiradsText",
            Task::DensityText => "DensityText",
            Task::FindingsText => "FindingsText",
        }
    }

    pub fn is_text(self) -> bool {
        matches!(self, Task::BiradsText | Task::DensityText | Task::FindingsText)
    }

    /// Full label vocabulary for classification tasks.
    pub fn classes(self) -> Vec<String> {
        match self {
            Task::Birads => Birads::ALL.iter().map(|b| b.get().to_string()).collect(),
            Task::Density => Density::ALL.iter().map(|d| d.letter().to_string()).collect(),
            Task::Suspicion => Suspicion::ALL.iter().map(|s| s.as_str().to_string()).collect(),
            Task::Mass | Task::Calcification | Task::Asymmetry => vec!["absent".to_string(), "present".to_string()],
            _ => Vec::new(),
        }
    }
}

fn presence(b: bool) -> String {
    if b { "present" } else { "absent" }.to_string()
}

/// Gold and predicted label of a classification task for one record.
fn labels_for(task: Task, rec: &RunRecord) -> (String, Option<String>) {
    let gold = &rec.gold;
    let parsed = &rec.parsed;
    match task {
        Task::Birads => (gold.birads_class.get().to_string(), parsed.birads_class.map(|b| b.get().to_string())),
        Task::Density => (gold.density_class.letter().to_string(), parsed.density_class.map(|d| d.letter().to_string())),
        Task::Suspicion => (gold.suspicion.as_str().to_string(), parsed.suspicion.map(|s| s.as_str().to_string())),
        Task::Mass => (presence(gold.flags.mass), parsed.flags.map(|f| presence(f.mass))),
        Task::Calcification => (presence(gold.flags.calcification), parsed.flags.map(|f| presence(f.calcification))),
        Task::Asymmetry => (presence(gold.flags.asymmetry), parsed.flags.map(|f| presence(f.asymmetry))),
        _ => unreachable!("text task"),
    }
}

fn texts_for(task: Task, rec: &RunRecord) -> (&str, &str) {
    let cand = match task {
        Task::BiradsText => rec.parsed.birads_text.as_deref(),
        Task::DensityText => rec.parsed.density_text.as_deref(),
        Task::FindingsText => rec.parsed.findings_text.as_deref(),
        _ => unreachable!("classification task"),
    };
    let reference = match task {
        Task::BiradsText => rec.gold.birads_text.as_str(),
        Task::DensityText => rec.gold.density_text.as_str(),
        _ => rec.gold.findings_text.as_str(),
    };
    (cand.unwrap_or(""), reference)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskOutcome<T> {
    Classification(ClassificationMetrics<T>),
    Text(TextScores<T>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult<T> {
    pub task: Task,
    pub outcome: TaskOutcome<T>,
    pub n: u64,
}

/// Confusion matrix of one classification task over a record set.
pub fn confusion_for(task: Task, records: &[RunRecord]) -> Result<ConfusionMatrix, EvalError> {
    let mut cm = ConfusionMatrix::new(task.classes());
    for rec in records {
        let (gold, pred) = labels_for(task, rec);
        cm.update(&gold, pred.as_deref())?;
    }
    Ok(cm)
}

/// Per-task results in fixed task order. Empty input yields an empty list.
pub fn aggregate<T: Scalar, E: TokenEmbedder<T> + ?Sized>(
    records: &[RunRecord],
    embedder: &E,
) -> Result<Vec<TaskResult<T>>, EvalError> {
    let mut runs: Vec<String> = records.iter().map(|r| r.run_id.clone()).collect();
    runs.sort();
    runs.dedup();
    if runs.len() > 1 {
        return Err(EvalError::MixedExperiments(runs));
    }
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let n = records.len() as u64;
    let mut out = Vec::with_capacity(Task::ALL.len());
    for task in Task::ALL {
        let outcome = if task.is_text() {
            let mut rouge = Vec::with_capacity(records.len());
            let mut bert = Vec::with_capacity(records.len());
            for rec in records {
                let (cand, reference) = texts_for(task, rec);
                rouge.push(rouge_l::<T>(cand, reference));
                bert.push(bert_score::<T, E>(cand, reference, embedder)?);
            }
            TaskOutcome::Text(TextScores {
                rouge_l: mean_prf(&rouge),
                bert_score: mean_prf(&bert),
            })
        } else {
            TaskOutcome::Classification(compute(&confusion_for(task, records)?)?)
        };
        out.push(TaskResult { task, outcome, n });
    }
    Ok(out)
}

fn mean_prf<T: Scalar>(items: &[Prf<T>]) -> Prf<T> {
    Prf {
        precision: mean(items.iter().map(|p| p.precision)),
        recall: mean(items.iter().map(|p| p.recall)),
        f: mean(items.iter().map(|p| p.f)),
    }
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub task: String,
    pub metric: String,
    pub value: String,
    pub prompt: String,
    pub model: String,
}

pub const TABLE_HEADER: [&str; 5] = ["Task", "Metric", "Value", "Prompt", "Model"];

/// Metric rows of one task result as `(metric, value)` pairs; counts are integers.
pub fn metric_values<T: Scalar>(result: &TaskResult<T>) -> Vec<(&'static str, MetricValue)> {
    let f = |x: T| MetricValue::Real(x.to_f64_lossy());
    match &result.outcome {
        TaskOutcome::Classification(m) => vec![
            ("Accuracy", f(m.micro_accuracy)),
            ("Micro Recall", f(m.micro_recall)),
            ("Precision", f(m.macro_precision)),
            ("Recall", f(m.macro_recall)),
            ("F1", f(m.macro_f1)),
            ("Specificity", f(m.macro_specificity)),
            ("Unparsed", MetricValue::Count(m.unparsed)),
            ("N", MetricValue::Count(result.n)),
        ],
        TaskOutcome::Text(t) => vec![
            ("ROUGE-L Precision", f(t.rouge_l.precision)),
            ("ROUGE-L Recall", f(t.rouge_l.recall)),
            ("ROUGE-L F1", f(t.rouge_l.f)),
            ("BERTScore Precision", f(t.bert_score.precision)),
            ("BERTScore Recall", f(t.bert_score.recall)),
            ("BERTScore F1", f(t.bert_score.f)),
            ("N", MetricValue::Count(result.n)),
        ],
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetricValue {
    Real(f64),
    Count(u64),
}

impl MetricValue {
    pub fn as_f64(self) -> f64 {
        match self {
            MetricValue::Real(x) => x,
            MetricValue::Count(n) => n as f64,
        }
    }

    pub fn render(self) -> String {
        match self {
            MetricValue::Real(x) => format!("{x:.6}"),
            MetricValue::Count(n) => n.to_string(),
        }
    }
}

pub fn table_rows<T: Scalar>(results: &[TaskResult<T>], prompt: &str, model: &str) -> Vec<TableRow> {
    results
        .iter()
        .flat_map(|r| {
            metric_values(r).into_iter().map(move |(metric, v)| TableRow {
                task: r.task.name().to_string(),
                metric: metric.to_string(),
                value: v.render(),
                prompt: prompt.to_string(),
                model: model.to_string(),
            })
        })
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn render_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.iter().map(|c| csv_field(c)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

pub fn render_markdown(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    for row in rows {
        let cells: Vec<String> = row.iter().map(|c| c.replace('|', "\\|")).collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
    }
    out
}

impl TableRow {
    pub fn cells(&self) -> Vec<String> {
        vec![
            self.task.clone(),
            self.metric.clone(),
            self.value.clone(),
            self.prompt.clone(),
            self.model.clone(),
        ]
    }
}
