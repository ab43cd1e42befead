//! The per-case run loop: composite, prompt, generate, parse, append.

use std::collections::HashSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use futures::stream::{self, StreamExt};
use mammo_client::{EmbedPayload, EmbeddingClient, GenerationRequest, ModelClient};
use mammo_core::dataset::SplitSide;
use mammo_core::imaging::ImagingConfig;
use mammo_core::parser;
use mammo_core::prompt::{
    builtin_few_shot_exemplars, parse_exemplars, Attachment, Exemplar, PromptMode, RenderOptions, TemplateSet,
    FEW_SHOT_COUNT,
};
use mammo_core::results::{
    intact_prefix_len, parse_results, CaseError, RunProvenance, RunRecord, SplitInfo, PROVENANCE_TYPE,
};
use mammo_core::scalar::format_ratio;
use mammo_core::vector_store::{RetrievalConfig, VectorIndex};

use crate::cases::{composite_png, load_for, Case};
use crate::config::ExperimentConfig;
use crate::error::{HarnessError, PreflightKind};
use crate::index::{load_checked, query_vector};

pub const FROZEN_TIMESTAMP: &str = "1970-01-01T00:00:00Z";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSummary {
    pub results_path: PathBuf,
    pub total_cases: usize,
    pub skipped: usize,
    pub appended: usize,
    pub errors: usize,
    pub warnings: Vec<String>,
}

struct RunContext {
    cfg: ExperimentConfig,
    mode: PromptMode,
    templates: TemplateSet,
    few_shot: Vec<Exemplar>,
    imaging: ImagingConfig,
    cache_dir: PathBuf,
    client: ModelClient,
    embedder: Option<EmbeddingClient>,
    index: Option<VectorIndex>,
    template_digest: String,
}

fn timestamp(frozen: bool) -> String {
    if frozen {
        FROZEN_TIMESTAMP.to_string()
    } else {
        chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
    }
}

fn load_templates(cfg: &ExperimentConfig) -> Result<(TemplateSet, Vec<Exemplar>), HarnessError> {
    let fail = |e: &dyn std::fmt::Display| HarnessError::preflight(PreflightKind::TemplateInvalid, e.to_string());
    let templates = match &cfg.prompt.template_dir {
        Some(dir) => TemplateSet::load_dir(dir).map_err(|e| fail(&e))?,
        None => TemplateSet::builtin(),
    };
    let few_shot = match &cfg.prompt.exemplars {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| fail(&format!("{}: {e}", path.display())))?;
            parse_exemplars(&text).map_err(|e| fail(&e))?
        }
        None => builtin_few_shot_exemplars(),
    };
    Ok((templates, few_shot))
}

/// Everything `run` checks before touching the results file.
async fn preflight(cfg: &ExperimentConfig, warnings: &mut Vec<String>) -> Result<(RunContext, Vec<Case>, RunProvenance), HarnessError> {
    cfg.validate()?;
    let mode = cfg.mode()?;
    let (templates, few_shot) = load_templates(cfg)?;
    if mode == PromptMode::FewShot && few_shot.len() != FEW_SHOT_COUNT {
        return Err(HarnessError::preflight(
            PreflightKind::TemplateInvalid,
            format!("few-shot needs {FEW_SHOT_COUNT} exemplars, found {}", few_shot.len()),
        ));
    }
    let data = load_for(cfg).map_err(|e| HarnessError::preflight(PreflightKind::DatasetUnloadable, e.to_string()))?;
    if !data.rejected.is_empty() {
        warnings.push(format!("{} dataset entries rejected", data.rejected.len()));
    }

    let (index, embedder) = if cfg.rag_enabled() {
        let path = cfg.rag.index_path.as_ref().expect("validated");
        let index = load_checked(path, &data.split, cfg)?;
        if index.is_empty() {
            return Err(HarnessError::preflight(PreflightKind::IndexInvalid, "index has no records"));
        }
        let embedder = EmbeddingClient::new(cfg.embedding_config().expect("validated"))
            .map_err(|e| HarnessError::preflight(PreflightKind::ProviderUnreachable, e.to_string()))?;
        (Some(index), Some(embedder))
    } else {
        (None, None)
    };

    let client = ModelClient::new(cfg.client_config())?;
    let info = client
        .health_check()
        .await
        .map_err(|e| HarnessError::preflight(PreflightKind::ServerUnreachable, e.to_string()))?;
    if info.models.is_empty() {
        warnings.push("model server reports no models".to_string());
    } else if !info.models.iter().any(|m| m == &cfg.model_name) {
        return Err(HarnessError::preflight(
            PreflightKind::ModelMissing,
            format!("{} not in {:?}", cfg.model_name, info.models),
        ));
    }
    if cfg.concurrency() > 1 {
        warnings.push("concurrency > 1: server-side queuing can inflate per-case latencies".to_string());
    }

    let imaging = ImagingConfig::new(cfg.dataset.image_side)?;
    let template_digest = templates.template_digest(mode);
    let provenance = RunProvenance {
        record_type: PROVENANCE_TYPE.to_string(),
        run_id: cfg.run_id.clone(),
        created: timestamp(cfg.frozen_time),
        model: cfg.model_name.clone(),
        prompt_mode: mode.as_str().to_string(),
        rag: cfg.rag_enabled(),
        dataset_kind: data.kind.as_str().to_string(),
        split: SplitInfo {
            unit: serde_json::to_value(data.split.unit)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            ratio: format_ratio(&data.split.ratio),
            seed: data.split.seed,
        },
        template_digest: template_digest.clone(),
        imaging_digest: Some(imaging.digest()),
        index_manifest: index.as_ref().map(|i| serde_json::to_value(i.manifest()).expect("manifest serializes")),
        config: cfg.snapshot(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let mut cases: Vec<Case> = data.side(SplitSide::Test).cloned().collect();
    if let Some(max) = cfg.limits.max_cases {
        cases.truncate(max);
    }
    let ctx = RunContext {
        cfg: cfg.clone(),
        mode,
        templates,
        few_shot,
        imaging,
        cache_dir: cfg.cache_dir(),
        client,
        embedder,
        index,
        template_digest,
    };
    Ok((ctx, cases, provenance))
}

/// Open the results file for appending, creating it with a header or
/// checking the existing header, and return the completed case ids.
fn prepare_results_file(path: &Path, header: &RunProvenance) -> Result<HashSet<String>, HarnessError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(HarnessError::io(path, e)),
    };
    let keep = intact_prefix_len(&text);
    if keep < text.len() {
        tracing::warn!(path = %path.display(), "dropping partial trailing line from interrupted run");
        let f = OpenOptions::new().write(true).open(path).map_err(|e| HarnessError::io(path, e))?;
        f.set_len(keep as u64).map_err(|e| HarnessError::io(path, e))?;
    }
    let existing = parse_results(&text[..keep])?;
    match existing.provenance {
        None if existing.records.is_empty() => {
            let mut line = serde_json::to_string(header).expect("header serializes");
            line.push('\n');
            fs::write(path, line).map_err(|e| HarnessError::io(path, e))?;
            Ok(HashSet::new())
        }
        None => Err(HarnessError::preflight(
            PreflightKind::ResultsConflict,
            format!("{} has records but no provenance header", path.display()),
        )),
        Some(old) => {
            if old.template_digest != header.template_digest {
                return Err(HarnessError::TemplateDrift {
                    recorded: old.template_digest,
                    current: header.template_digest.clone(),
                });
            }
            let same = old.run_id == header.run_id
                && old.model == header.model
                && old.prompt_mode == header.prompt_mode
                && old.rag == header.rag
                && old.split == header.split
                && old.dataset_kind == header.dataset_kind;
            if !same {
                return Err(HarnessError::preflight(
                    PreflightKind::ResultsConflict,
                    format!("{} was produced by a different experiment", path.display()),
                ));
            }
            if let Some(r) = existing.records.iter().find(|r| r.template_digest != header.template_digest) {
                return Err(HarnessError::TemplateDrift {
                    recorded: r.template_digest.clone(),
                    current: header.template_digest.clone(),
                });
            }
            Ok(existing.records.into_iter().map(|r| r.case_id).collect())
        }
    }
}

/// Run the experiment; resumes if the results file already has records.
pub async fn run(cfg: &ExperimentConfig) -> Result<RunSummary, HarnessError> {
    let mut warnings = Vec::new();
    let (ctx, cases, header) = preflight(cfg, &mut warnings).await?;
    for w in &warnings {
        tracing::warn!("{w}");
    }
    let path = cfg.results_path();
    let done = prepare_results_file(&path, &header)?;
    let total_cases = cases.len();
    let pending: Vec<Case> = cases.into_iter().filter(|c| !done.contains(&c.case_id)).collect();
    let skipped = total_cases - pending.len();

    let mut file = OpenOptions::new().append(true).open(&path).map_err(|e| HarnessError::io(&path, e))?;
    let ctx = &ctx;
    let mut results = stream::iter(pending.iter())
        .map(|case| process_case(ctx, case))
        .buffered(cfg.concurrency());
    let mut appended = 0;
    let mut errors = 0;
    while let Some(record) = results.next().await {
        if record.error.is_some() {
            errors += 1;
        }
        let mut line = serde_json::to_string(&record).expect("record serializes");
        line.push('\n');
        file.write_all(line.as_bytes()).map_err(|e| HarnessError::io(&path, e))?;
        file.flush().map_err(|e| HarnessError::io(&path, e))?;
        appended += 1;
    }
    Ok(RunSummary {
        results_path: path,
        total_cases,
        skipped,
        appended,
        errors,
        warnings,
    })
}

async fn process_case(ctx: &RunContext, case: &Case) -> RunRecord {
    let started = Instant::now();
    let (raw_output, exemplar_ids, error) = match generate_for(ctx, case).await {
        Ok((text, ids)) => (text, ids, None),
        Err((ids, e)) => (String::new(), ids, Some(e)),
    };
    let latency_ms = if ctx.cfg.frozen_time { 0 } else { started.elapsed().as_millis() as u64 };
    RunRecord {
        run_id: ctx.cfg.run_id.clone(),
        case_id: case.case_id.clone(),
        prompt_mode: ctx.mode.as_str().to_string(),
        model: ctx.cfg.model_name.clone(),
        rag: ctx.index.is_some(),
        exemplar_ids,
        parsed: parser::parse(&raw_output),
        raw_output,
        gold: case.gold.clone(),
        latency_ms,
        template_digest: ctx.template_digest.clone(),
        timestamp: timestamp(ctx.cfg.frozen_time),
        error,
    }
}

fn case_error(kind: &str, e: impl std::fmt::Display) -> CaseError {
    CaseError {
        kind: kind.to_string(),
        message: e.to_string(),
    }
}

async fn retrieve(ctx: &RunContext, png: &[u8]) -> Result<Vec<Exemplar>, CaseError> {
    let (index, embedder) = match (&ctx.index, &ctx.embedder) {
        (Some(i), Some(e)) => (i, e),
        _ => return Ok(Vec::new()),
    };
    let emb = embedder
        .embed(EmbedPayload::Image(png))
        .await
        .map_err(|e| case_error(e.kind.name(), &e))?;
    let mut q = query_vector(&emb.vector).map_err(|e| case_error("Retrieval", e))?;
    if ctx.cfg.rag.fuse_prompt_text {
        let text = embedder
            .embed(EmbedPayload::Text(&ctx.templates.template(ctx.mode).body))
            .await
            .map_err(|e| case_error(e.kind.name(), &e))?;
        let t = query_vector(&text.vector).map_err(|e| case_error("Retrieval", e))?;
        q = q.mean_with(&t).map_err(|e| case_error("Retrieval", e))?;
    }
    let retrieval = RetrievalConfig::new(ctx.cfg.rag.k).map_err(|e| case_error("Retrieval", e))?;
    let hits = index.top_k(&q, &retrieval).map_err(|e| case_error("Retrieval", e))?;
    hits.into_iter()
        .map(|(rec, _)| {
            let mut ex = Exemplar::new(rec.record_id.clone(), &rec.report_payload).map_err(|e| case_error("Retrieval", e))?;
            if ctx.cfg.rag.attach_exemplar_images {
                let png = fs::read(&rec.image_ref).map_err(|e| case_error("ImageLoad", format!("{}: {e}", rec.image_ref)))?;
                ex = ex.with_image(Attachment {
                    id: rec.record_id.clone(),
                    png,
                });
            }
            Ok(ex)
        })
        .collect()
}

async fn generate_for(ctx: &RunContext, case: &Case) -> Result<(String, Vec<String>), (Vec<String>, CaseError)> {
    let (_, png) = composite_png(case, &ctx.imaging, &ctx.cache_dir).map_err(|e| (Vec::new(), case_error("ImageLoad", e)))?;
    let exemplars = match ctx.mode {
        PromptMode::FewShot => ctx.few_shot.clone(),
        PromptMode::RagFewShot => retrieve(ctx, &png).await.map_err(|e| (Vec::new(), e))?,
        _ => Vec::new(),
    };
    let options = RenderOptions {
        attach_exemplar_images: ctx.cfg.rag.attach_exemplar_images,
        layout: case.layout(),
    };
    let query = Attachment {
        id: case.case_id.clone(),
        png,
    };
    let ids: Vec<String> = exemplars.iter().map(|e| e.image_id.clone()).collect();
    let prompt = ctx
        .templates
        .render(ctx.mode, query, &exemplars, &options)
        .map_err(|e| (ids.clone(), case_error("Prompt", e)))?;
    let mut req = GenerationRequest::new(ctx.cfg.model_name.clone(), prompt.text)
        .with_seed(ctx.cfg.prompt.seed)
        .with_max_tokens(ctx.cfg.prompt.max_tokens);
    for a in &prompt.attachments {
        req = req.with_image_bytes(&a.png);
    }
    match ctx.client.generate(&req).await {
        Ok(resp) => Ok((resp.text, prompt.exemplar_ids)),
        Err(e) => Err((prompt.exemplar_ids, case_error(e.kind.name(), &e))),
    }
}
