mod common;

use std::fs;
use std::path::Path;

use common::{config_toml, rag_section, records_only, Fixture};
use mammo_client::{MockConfig, MockServer};
use mammo_core::dataset::SplitSide;
use mammo_core::results::{parse_results, validate_results};
use mammo_harness::cases::load_for;
use mammo_harness::evaluate::{compare, evaluate_file, evaluate_text, write_outputs};
use mammo_harness::index::build_index;
use mammo_harness::run::run;
use mammo_harness::{HarnessError, PreflightKind};

fn golden_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden"))
}

fn preflight_kind(e: &HarnessError) -> PreflightKind {
    e.preflight_kind().cloned().unwrap_or_else(|| panic!("expected preflight failure, got {e}"))
}

#[tokio::test(flavor = "multi_thread")]
async fn zero_shot_runs_are_byte_identical() {
    let fx = Fixture::new();
    let server = MockServer::start(MockConfig::default()).await.unwrap();
    let mut outputs = Vec::new();
    for i in 0..3 {
        let mut cfg = fx.config("zs.toml", &config_toml("zs", "zero-shot", &server.url()));
        cfg.output_dir = fx.path().join(format!("out{i}"));
        let summary = run(&cfg).await.unwrap();
        assert_eq!(summary.total_cases, 10);
        assert_eq!(summary.appended, 10);
        outputs.push(fs::read(&summary.results_path).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[1], outputs[2]);
    let text = String::from_utf8(outputs.remove(0)).unwrap();
    let report = validate_results(&text);
    assert!(report.is_valid(), "{:?}", report.errors);
    assert_eq!(report.records, 10);
    assert!(report.has_provenance);
    // ten generations per run
    assert_eq!(server.request_count("/api/generate"), 30);
}

#[tokio::test(flavor = "multi_thread")]
async fn evaluation_matches_golden_tables() {
    let fx = Fixture::new();
    let server = MockServer::start(MockConfig::default()).await.unwrap();
    let cfg = fx.config("zs.toml", &config_toml("zs", "zero-shot", &server.url()));
    let summary = run(&cfg).await.unwrap();
    let text = fs::read_to_string(&summary.results_path).unwrap();
    let eval = evaluate_text(&text).unwrap();
    let golden = golden_dir();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::write(golden.join("e2e.records.jsonl"), records_only(&text)).unwrap();
        fs::write(golden.join("e2e.metrics.csv"), eval.csv()).unwrap();
        fs::write(golden.join("e2e.metrics.md"), eval.markdown()).unwrap();
    }
    assert_eq!(records_only(&text), fs::read_to_string(golden.join("e2e.records.jsonl")).unwrap());
    assert_eq!(eval.csv(), fs::read_to_string(golden.join("e2e.metrics.csv")).unwrap());
    assert_eq!(eval.markdown(), fs::read_to_string(golden.join("e2e.metrics.md")).unwrap());

    let written = write_outputs(&summary.results_path, &eval).unwrap();
    assert_eq!(written.len(), 3);
    assert_eq!(fs::read_to_string(&written[0]).unwrap(), eval.csv());
}

fn oracle_value(oracle: &serde_json::Value, task: &str, metric: &str) -> f64 {
    oracle["tasks"][task][metric]
        .as_f64()
        .unwrap_or_else(|| panic!("oracle lacks {task}/{metric}"))
}

#[test]
fn golden_metrics_match_independent_oracle() {
    let golden = golden_dir();
    let records = fs::read_to_string(golden.join("e2e.records.jsonl")).unwrap();
    let oracle: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(golden.join("e2e.oracle.json")).unwrap()).unwrap();
    let eval = evaluate_text(&records).unwrap();
    let mut checked = 0;
    for r in &eval.results {
        for (metric, v) in mammo_core::evaluation::metric_values(r) {
            let expected = oracle_value(&oracle, r.task.name(), metric);
            assert!(
                (v.as_f64() - expected).abs() <= 1e-12,
                "{} {metric}: {} vs oracle {expected}",
                r.task.name(),
                v.as_f64()
            );
            checked += 1;
        }
    }
    assert_eq!(checked, 6 * 8 + 3 * 7);
}

#[tokio::test(flavor = "multi_thread")]
async fn interrupted_run_resumes_to_the_same_file() {
    let fx = Fixture::new();
    let server = MockServer::start(MockConfig::default()).await.unwrap();
    let clean_cfg = {
        let mut c = fx.config("zs.toml", &config_toml("zs", "zero-shot", &server.url()));
        c.output_dir = fx.path().join("clean");
        c
    };
    let clean = fs::read(run(&clean_cfg).await.unwrap().results_path).unwrap();

    let mut cfg = fx.config("zs.toml", &config_toml("zs", "zero-shot", &server.url()));
    cfg.limits.max_cases = Some(6);
    let first = run(&cfg).await.unwrap();
    assert_eq!(first.appended, 6);
    // a write cut off mid-line
    let mut partial = fs::read(&first.results_path).unwrap();
    partial.extend_from_slice(br#"{"run_id":"zs","case_id":"P0"#);
    fs::write(&first.results_path, &partial).unwrap();

    cfg.limits.max_cases = None;
    cfg.limits.concurrency = Some(3);
    let second = run(&cfg).await.unwrap();
    assert_eq!(second.skipped, 6);
    assert_eq!(second.appended, 4);
    assert_eq!(fs::read(&second.results_path).unwrap(), clean);

    let third = run(&cfg).await.unwrap();
    assert_eq!(third.appended, 0);
    assert_eq!(fs::read(&third.results_path).unwrap(), clean);
}

#[tokio::test(flavor = "multi_thread")]
async fn resume_refuses_changed_template_or_experiment() {
    let fx = Fixture::new();
    let server = MockServer::start(MockConfig::default()).await.unwrap();
    let mut cfg = fx.config("zs.toml", &config_toml("zs", "zero-shot", &server.url()));
    cfg.limits.max_cases = Some(2);
    let path = run(&cfg).await.unwrap().results_path;

    let text = fs::read_to_string(&path).unwrap();
    let mut file = parse_results(&text).unwrap();
    file.provenance.as_mut().unwrap().template_digest = "0".repeat(64);
    let mut drifted = serde_json::to_string(&file.provenance).unwrap() + "\n";
    drifted.push_str(&records_only(&text));
    fs::write(&path, &drifted).unwrap();
    assert!(matches!(run(&cfg).await.unwrap_err(), HarnessError::TemplateDrift { .. }));

    fs::write(&path, &text).unwrap();
    let mut other = cfg.clone();
    other.split.seed = 8;
    assert_eq!(preflight_kind(&run(&other).await.unwrap_err()), PreflightKind::ResultsConflict);
}

#[tokio::test(flavor = "multi_thread")]
async fn preflight_failures_are_specific() {
    let fx = Fixture::new();
    let server = MockServer::start(MockConfig::default()).await.unwrap();

    let mut cfg = fx.config("zs.toml", &config_toml("zs", "zero-shot", &server.url()));
    cfg.model_name = "absent-model".into();
    assert_eq!(preflight_kind(&run(&cfg).await.unwrap_err()), PreflightKind::ModelMissing);

    let cfg = fx.config("dead.toml", &config_toml("dead", "zero-shot", "http://127.0.0.1:9"));
    assert_eq!(preflight_kind(&run(&cfg).await.unwrap_err()), PreflightKind::ServerUnreachable);

    let mut cfg = fx.config("zs.toml", &config_toml("zs", "zero-shot", &server.url()));
    cfg.dataset.metadata = Some(fx.path().join("nope.csv"));
    assert_eq!(preflight_kind(&run(&cfg).await.unwrap_err()), PreflightKind::DatasetUnloadable);

    let body = config_toml("rag", "rag", &server.url()) + &rag_section(&server.url());
    let cfg = fx.config("rag.toml", &body);
    assert_eq!(preflight_kind(&run(&cfg).await.unwrap_err()), PreflightKind::IndexMissing);
    assert!(!cfg.results_path().exists());
}

#[tokio::test(flavor = "multi_thread")]
async fn empty_model_list_warns_and_runs() {
    let fx = Fixture::new();
    let server = MockServer::start(MockConfig {
        models: Vec::new(),
        ..MockConfig::default()
    })
    .await
    .unwrap();
    let mut cfg = fx.config("zs.toml", &config_toml("zs", "zero-shot", &server.url()));
    cfg.limits.max_cases = Some(2);
    let summary = run(&cfg).await.unwrap();
    assert!(summary.warnings.iter().any(|w| w.contains("no models")));
    // the mock rejects unknown models per request, so every case records an error
    assert_eq!(summary.errors, 2);
    let file = parse_results(&fs::read_to_string(&summary.results_path).unwrap()).unwrap();
    assert_eq!(file.records[0].error.as_ref().unwrap().kind, "ModelNotFound");
}

#[tokio::test(flavor = "multi_thread")]
async fn rag_run_uses_only_train_exemplars() {
    let fx = Fixture::new();
    let server = MockServer::start(MockConfig::default()).await.unwrap();
    let body = config_toml("rag", "rag", &server.url()) + &rag_section(&server.url());
    let cfg = fx.config("rag.toml", &body);
    let manifest = build_index(&cfg).await.unwrap();
    assert_eq!(manifest.count, 40);
    assert_eq!(manifest.dimension, 64);

    let summary = run(&cfg).await.unwrap();
    assert_eq!(summary.appended, 10);
    assert_eq!(summary.errors, 0);
    let data = load_for(&cfg).unwrap();
    let file = parse_results(&fs::read_to_string(&summary.results_path).unwrap()).unwrap();
    let header = file.provenance.unwrap();
    assert!(header.rag);
    assert_eq!(header.index_manifest.unwrap()["count"], 40);
    for rec in &file.records {
        assert!(rec.rag);
        assert_eq!(rec.exemplar_ids.len(), 3);
        for id in &rec.exemplar_ids {
            assert_eq!(data.split.side(id), Some(SplitSide::Train), "{id} is not a train patient");
        }
        assert_eq!(data.split.side(&rec.case_id), Some(SplitSide::Test));
    }
    let eval = evaluate_file(&summary.results_path).unwrap();
    assert_eq!(eval.prompt, "rag");

    // an index built on another split leaks test patients into retrieval
    let mut other = cfg.clone();
    other.split.seed = 99;
    other.output_dir = fx.path().join("other");
    assert_eq!(preflight_kind(&run(&other).await.unwrap_err()), PreflightKind::IndexLeakage);

    // the wrong provider is refused before any case runs
    let mut wrong = cfg.clone();
    wrong.rag.provider_id = "someone-else".into();
    wrong.output_dir = fx.path().join("wrong");
    assert_eq!(preflight_kind(&run(&wrong).await.unwrap_err()), PreflightKind::IndexInvalid);
}

#[tokio::test(flavor = "multi_thread")]
async fn fused_text_query_shifts_retrieval() {
    let fx = Fixture::new();
    let server = MockServer::start(MockConfig::default()).await.unwrap();
    let body = config_toml("rag", "rag", &server.url()) + &rag_section(&server.url());
    let plain = fx.config("rag.toml", &body);
    build_index(&plain).await.unwrap();
    let mut fused = fx.config("fused.toml", &body.replace("dimension = 64", "dimension = 64\nfuse_prompt_text = true"));
    assert!(fused.rag.fuse_prompt_text);
    fused.run_id = "fused".into();

    let ids = |path: &Path| -> Vec<Vec<String>> {
        let file = parse_results(&fs::read_to_string(path).unwrap()).unwrap();
        file.records.into_iter().map(|r| r.exemplar_ids).collect()
    };
    let a = run(&plain).await.unwrap();
    let b = run(&fused).await.unwrap();
    assert_eq!(b.errors, 0);
    let data = load_for(&fused).unwrap();
    let (ia, ib) = (ids(&a.results_path), ids(&b.results_path));
    assert!(ib.iter().flatten().all(|id| data.split.side(id) == Some(SplitSide::Train)));
    assert_ne!(ia, ib, "averaging in the instruction embedding changed no retrieval");
}

#[tokio::test(flavor = "multi_thread")]
async fn few_shot_and_cot_runs_complete() {
    let fx = Fixture::new();
    let server = MockServer::start(MockConfig::default()).await.unwrap();
    for mode in ["few-shot", "cot"] {
        let cfg = fx.config("m.toml", &config_toml(mode, mode, &server.url()));
        let summary = run(&cfg).await.unwrap();
        assert_eq!(summary.appended, 10);
        let file = parse_results(&fs::read_to_string(&summary.results_path).unwrap()).unwrap();
        let expected_ids = if mode == "few-shot" { 5 } else { 0 };
        assert!(file.records.iter().all(|r| r.exemplar_ids.len() == expected_ids));
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn compare_picks_best_and_checks_splits() {
    let fx = Fixture::new();
    let server = MockServer::start(MockConfig::default()).await.unwrap();
    let mut evals = Vec::new();
    for mode in ["zero-shot", "few-shot"] {
        let cfg = fx.config("m.toml", &config_toml(mode, mode, &server.url()));
        let path = run(&cfg).await.unwrap().results_path;
        evals.push(evaluate_file(&path).unwrap());
    }
    let rows = compare(&evals).unwrap();
    assert_eq!(rows.len(), 6 * 6 + 3 * 6);
    for row in &rows {
        for e in &evals {
            let r = e.results.iter().find(|r| r.task == row.task).unwrap();
            let v = mammo_core::evaluation::metric_values(r)
                .into_iter()
                .find(|(m, _)| *m == row.metric)
                .unwrap()
                .1
                .as_f64();
            assert!(v <= row.value);
            if v == row.value && e.run_id != row.run_id {
                assert!(row.tied_with.contains(&e.run_id));
                assert!(row.run_id < e.run_id);
            }
        }
    }

    let mut other = fx.config("o.toml", &config_toml("other", "zero-shot", &server.url()));
    other.split.seed = 3;
    let path = run(&other).await.unwrap().results_path;
    evals.push(evaluate_file(&path).unwrap());
    assert!(matches!(compare(&evals).unwrap_err(), HarnessError::SplitMismatch(_)));
    assert!(compare(&evals[..1]).is_err());
}

#[test]
fn evaluate_handles_empty_and_corrupt_files() {
    let eval = evaluate_text("").unwrap();
    assert!(eval.rows.is_empty());
    assert!(!eval.warnings.is_empty());
    assert_eq!(eval.csv(), "Task,Metric,Value,Prompt,Model\n");

    let golden = fs::read_to_string(golden_dir().join("e2e.records.jsonl")).unwrap();
    let mut lines: Vec<&str> = golden.lines().collect();
    lines[3] = "{not json";
    let broken = lines.join("\n") + "\n";
    match evaluate_text(&broken).unwrap_err() {
        HarnessError::Results(e) => assert_eq!(e.line(), 4),
        other => panic!("unexpected {other}"),
    }
}
