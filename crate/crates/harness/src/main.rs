use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mammo_client::mock::serve_forever;
use mammo_client::{MockConfig, MockReply};
use mammo_core::dataset::SplitSide;
use mammo_core::imaging::{ImagingConfig, DEFAULT_TRANSLATE_CLASSES};
use mammo_core::results::validate_results;
use mammo_harness::cases::{composite_png, load_for};
use mammo_harness::evaluate::{compare, evaluate_file, render_compare, write_outputs};
use mammo_harness::index::build_index;
use mammo_harness::rebalance::{parse_targets, rebalance};
use mammo_harness::run::run;
use mammo_harness::ExperimentConfig;

#[derive(Parser)]
#[command(name = "mammo", version, about = "Mammogram report generation experiments against a local model server")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment TOML file.
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Args, Clone)]
struct RunOverrides {
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// zero-shot, few-shot, cot or rag.
    #[arg(long)]
    prompt_mode: Option<String>,
    /// Model server base URL (also `MW_ENDPOINT`).
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    max_cases: Option<usize>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    provider: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Load the dataset and report cases, split sizes and rejected entries.
    Ingest(ConfigArgs),
    /// Build cached composites for every case.
    Compose(ConfigArgs),
    /// Retrieval index commands.
    Index {
        #[command(subcommand)]
        command: IndexCommand,
    },
    /// Run (or resume) an experiment.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        overrides: RunOverrides,
    },
    /// Score a results file and write metric tables beside it.
    Evaluate { results: PathBuf },
    /// Best result per task and metric across runs.
    Compare {
        #[arg(required = true, num_args = 2..)]
        results: Vec<PathBuf>,
        /// Output prefix; writes `<prefix>.csv` and `<prefix>.md`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a class-rebalanced train set and manifest.
    Rebalance {
        #[command(flatten)]
        config: ConfigArgs,
        /// Per-class targets, e.g. `1=500,2=500,3=500,4=500,5=200`.
        #[arg(long)]
        targets: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Classes whose augmented copies are also translated.
        #[arg(long, value_delimiter = ',')]
        translate: Option<Vec<u8>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the deterministic mock model server.
    MockServer {
        #[arg(long, default_value_t = 11434)]
        port: u16,
        #[arg(long = "model", default_values_t = vec!["mock-vlm".to_string()])]
        models: Vec<String>,
        /// Reply with this file's contents instead of synthetic reports.
        #[arg(long)]
        reply_file: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        embed_dim: usize,
        #[arg(long, default_value = "mock-pool8")]
        provider_id: String,
    },
    /// Parse raw model output into the structured report.
    Parse { file: PathBuf },
    /// Check a results JSONL file against the record schema.
    Validate { file: PathBuf },
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Embed train-split composites and persist the index.
    Build(ConfigArgs),
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply_env();
    Ok(cfg)
}

fn apply_overrides(cfg: &mut ExperimentConfig, o: RunOverrides) {
    if let Some(v) = o.run_id {
        cfg.run_id = v;
    }
    if let Some(v) = o.model {
        cfg.model_name = v;
    }
    if let Some(v) = o.prompt_mode {
        cfg.prompt_mode = v;
    }
    if let Some(v) = o.endpoint {
        cfg.endpoint.generate = v;
    }
    if let Some(v) = o.output_dir {
        cfg.output_dir = v;
    }
    if let Some(v) = o.max_cases {
        cfg.limits.max_cases = Some(v);
    }
    if let Some(v) = o.concurrency {
        cfg.limits.concurrency = Some(v);
    }
    if let Some(v) = o.index {
        cfg.rag.index_path = Some(v);
    }
    if let Some(v) = o.provider {
        cfg.rag.provider = Some(v);
    }
}

async fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Ingest(a) => {
            let cfg = load_config(&a.config)?;
            let data = load_for(&cfg)?;
            println!(
                "cases={} train={} test={} rejected={}",
                data.cases.len(),
                data.side(SplitSide::Train).count(),
                data.side(SplitSide::Test).count(),
                data.rejected.len()
            );
            for r in &data.rejected {
                println!("rejected: {r}");
            }
        }
        Command::Compose(a) => {
            let cfg = load_config(&a.config)?;
            let data = load_for(&cfg)?;
            let imaging = ImagingConfig::new(cfg.dataset.image_side)?;
            let cache = cfg.cache_dir();
            for case in &data.cases {
                let (path, _) = composite_png(case, &imaging, &cache)?;
                println!("{}", path.display());
            }
        }
        Command::Index {
            command: IndexCommand::Build(a),
        } => {
            let cfg = load_config(&a.config)?;
            let manifest = build_index(&cfg).await?;
            println!("{}", serde_json::to_string_pretty(&manifest)?);
        }
        Command::Run { config, overrides } => {
            let mut cfg = load_config(&config.config)?;
            apply_overrides(&mut cfg, overrides);
            let summary = run(&cfg).await?;
            println!(
                "{}: {} cases, {} already done, {} appended, {} errors",
                summary.results_path.display(),
                summary.total_cases,
                summary.skipped,
                summary.appended,
                summary.errors
            );
        }
        Command::Evaluate { results } => {
            let eval = evaluate_file(&results)?;
            for w in &eval.warnings {
                tracing::warn!("{w}");
            }
            for p in write_outputs(&results, &eval)? {
                eprintln!("wrote {}", p.display());
            }
            print!("{}", eval.markdown());
        }
        Command::Compare { results, out } => {
            let evals = results.iter().map(|p| evaluate_file(p)).collect::<Result<Vec<_>, _>>()?;
            let rows = compare(&evals)?;
            let (csv, md) = render_compare(&rows);
            if let Some(prefix) = out {
                let csv_path = prefix.with_extension("csv");
                let md_path = prefix.with_extension("md");
                std::fs::write(&csv_path, &csv).with_context(|| csv_path.display().to_string())?;
                std::fs::write(&md_path, &md).with_context(|| md_path.display().to_string())?;
            }
            print!("{md}");
        }
        Command::Rebalance {
            config,
            targets,
            seed,
            translate,
            out,
        } => {
            let cfg = load_config(&config.config)?;
            let targets: BTreeMap<u8, usize> = parse_targets(&targets)?;
            let translate = translate.unwrap_or_else(|| DEFAULT_TRANSLATE_CLASSES.to_vec());
            let result = rebalance(&cfg, &targets, &translate, seed, &out)?;
            for (class, plan) in &result.plan.classes {
                println!("class {class}: {} -> {} ({:?})", plan.original_count, plan.target_count, plan.action);
            }
            println!("{}", result.manifest_path.display());
        }
        Command::MockServer {
            port,
            models,
            reply_file,
            embed_dim,
            provider_id,
        } => {
            let reply = match reply_file {
                Some(p) => MockReply::Fixed(std::fs::read_to_string(&p).with_context(|| p.display().to_string())?),
                None => MockReply::Synthetic,
            };
            let cfg = MockConfig {
                models,
                reply,
                embed_dim,
                provider_id,
                ..MockConfig::default()
            };
            let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
            eprintln!("mock server listening on http://{}", listener.local_addr()?);
            serve_forever(listener, cfg).await?;
        }
        Command::Parse { file } => {
            let text = std::fs::read_to_string(&file).with_context(|| file.display().to_string())?;
            println!("{}", serde_json::to_string_pretty(&mammo_core::parser::parse(&text))?);
        }
        Command::Validate { file } => {
            let text = std::fs::read_to_string(&file).with_context(|| file.display().to_string())?;
            let report = validate_results(&text);
            for e in &report.errors {
                println!("line {}: {e}", e.line());
            }
            println!(
                "{} records, provenance header: {}",
                report.records,
                if report.has_provenance { "yes" } else { "no" }
            );
            if !report.is_valid() {
                bail!("{} problems found", report.errors.len());
            }
        }
    }
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match dispatch(cli.command).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
