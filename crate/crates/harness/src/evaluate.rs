//! Scoring results files and comparing runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mammo_core::evaluation::{
    aggregate, metric_values, render_csv, render_markdown, table_rows, HashedNgramEmbedder, MetricValue, TableRow,
    Task, TaskResult, TABLE_HEADER,
};
use mammo_core::results::{parse_results, ResultsFile};

use crate::error::HarnessError;

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub run_id: String,
    pub prompt: String,
    pub model: String,
    pub rag: bool,
    pub split: Option<(String, String)>,
    pub results: Vec<TaskResult<f64>>,
    pub rows: Vec<TableRow>,
    pub warnings: Vec<String>,
}

impl Evaluation {
    pub fn csv(&self) -> String {
        render_csv(&TABLE_HEADER, &self.rows.iter().map(TableRow::cells).collect::<Vec<_>>())
    }

    pub fn markdown(&self) -> String {
        render_markdown(&TABLE_HEADER, &self.rows.iter().map(TableRow::cells).collect::<Vec<_>>())
    }

    pub fn metrics_json(&self) -> serde_json::Value {
        serde_json::json!({
            "run_id": self.run_id,
            "prompt": self.prompt,
            "model": self.model,
            "rag": self.rag,
            "tasks": self.results,
        })
    }
}

fn prompt_label(mode: &str, rag: bool) -> String {
    if rag {
        "rag".to_string()
    } else {
        mode.to_string()
    }
}

/// Score the contents of a results file.
pub fn evaluate_text(text: &str) -> Result<Evaluation, HarnessError> {
    let file: ResultsFile = parse_results(text)?;
    let mut warnings = Vec::new();
    let (run_id, prompt, model, rag, split) = match (&file.provenance, file.records.first()) {
        (Some(p), _) => (
            p.run_id.clone(),
            prompt_label(&p.prompt_mode, p.rag),
            p.model.clone(),
            p.rag,
            Some((p.dataset_kind.clone(), serde_json::to_string(&p.split).expect("split serializes"))),
        ),
        (None, Some(r)) => (
            r.run_id.clone(),
            prompt_label(&r.prompt_mode, r.rag),
            r.model.clone(),
            r.rag,
            None,
        ),
        (None, None) => Default::default(),
    };
    if file.records.is_empty() {
        warnings.push("results file has no records; table is empty".to_string());
    }
    let results = aggregate::<f64, _>(&file.records, &HashedNgramEmbedder::default())?;
    let rows = table_rows(&results, &prompt, &model);
    Ok(Evaluation {
        run_id,
        prompt,
        model,
        rag,
        split,
        results,
        rows,
        warnings,
    })
}

pub fn evaluate_file(path: &Path) -> Result<Evaluation, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    evaluate_text(&text)
}

/// Write `<stem>.metrics.{csv,md,json}` next to the results file.
pub fn write_outputs(results_path: &Path, eval: &Evaluation) -> Result<Vec<PathBuf>, HarnessError> {
    let stem = results_path.file_stem().and_then(|s| s.to_str()).unwrap_or("results");
    let dir = results_path.parent().unwrap_or(Path::new("."));
    let outputs = [
        (dir.join(format!("{stem}.metrics.csv")), eval.csv()),
        (dir.join(format!("{stem}.metrics.md")), eval.markdown()),
        (
            dir.join(format!("{stem}.metrics.json")),
            serde_json::to_string_pretty(&eval.metrics_json()).expect("metrics serialize") + "\n",
        ),
    ];
    let mut written = Vec::new();
    for (path, body) in outputs {
        fs::write(&path, body).map_err(|e| HarnessError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

pub const COMPARE_HEADER: [&str; 8] = ["Task", "Metric", "Best Result", "Prompt", "Model", "RAG", "Run", "Tie"];

#[derive(Debug, Clone, PartialEq)]
pub struct BestRow {
    pub task: Task,
    pub metric: String,
    pub value: f64,
    pub prompt: String,
    pub model: String,
    pub rag: bool,
    pub run_id: String,
    /// Other runs reaching the same value.
    pub tied_with: Vec<String>,
}

impl BestRow {
    pub fn cells(&self) -> Vec<String> {
        vec![
            self.task.name().to_string(),
            self.metric.clone(),
            MetricValue::Real(self.value).render(),
            self.prompt.clone(),
            self.model.clone(),
            if self.rag { "yes" } else { "no" }.to_string(),
            self.run_id.clone(),
            self.tied_with.join(" "),
        ]
    }
}

/// Best run per (task, metric). Ties go to the smallest run id and are marked.
pub fn compare(evals: &[Evaluation]) -> Result<Vec<BestRow>, HarnessError> {
    if evals.len() < 2 {
        return Err(HarnessError::Config("compare needs at least two runs".into()));
    }
    let splits: Vec<_> = evals.iter().filter_map(|e| e.split.as_ref()).collect();
    if let Some(first) = splits.first() {
        if let Some(other) = splits.iter().find(|s| s != &first) {
            return Err(HarnessError::SplitMismatch(format!("{first:?} vs {other:?}")));
        }
    }
    let mut sorted: Vec<&Evaluation> = evals.iter().collect();
    sorted.sort_by(|a, b| a.run_id.cmp(&b.run_id));

    let mut best: BTreeMap<(Task, usize), BestRow> = BTreeMap::new();
    for e in sorted {
        for r in &e.results {
            for (i, (metric, v)) in metric_values(r).into_iter().enumerate() {
                if metric == "Unparsed" || metric == "N" {
                    continue;
                }
                let value = v.as_f64();
                let row = BestRow {
                    task: r.task,
                    metric: metric.to_string(),
                    value,
                    prompt: e.prompt.clone(),
                    model: e.model.clone(),
                    rag: e.rag,
                    run_id: e.run_id.clone(),
                    tied_with: Vec::new(),
                };
                match best.get_mut(&(r.task, i)) {
                    None => {
                        best.insert((r.task, i), row);
                    }
                    Some(cur) if value > cur.value => *cur = row,
                    Some(cur) if value == cur.value => cur.tied_with.push(e.run_id.clone()),
                    Some(_) => {}
                }
            }
        }
    }
    Ok(best.into_values().collect())
}

pub fn render_compare(rows: &[BestRow]) -> (String, String) {
    let cells: Vec<Vec<String>> = rows.iter().map(BestRow::cells).collect();
    (render_csv(&COMPARE_HEADER, &cells), render_markdown(&COMPARE_HEADER, &cells))
}
