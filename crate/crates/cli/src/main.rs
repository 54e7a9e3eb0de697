//! `stancedet` command-line entry point.
//!
//! JSON results go to stdout, logs to stderr. Exit codes: 0 success,
//! 1 runtime or partial failure, 2 usage error.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use stancedet::agents::{AgentContext, ModelParams};
use stancedet::embedding::{EmbeddingProviderConfig, PrecomputedEmbeddings};
use stancedet::eval::{
    run_ablation, run_agent_contributions, run_noise_study, run_sensitivity, StudyRow, StudyTable, VerdictRecord,
    NOISE_GRID,
};
use stancedet::llm::{HttpChatConfig, MockScript};
use stancedet::store::BuildOptions;
use stancedet::{
    build_store, classify, load_dataset, load_store, run_experiment, save_store, CallTrace, ChatBackend,
    DefaultScalar, EmbeddingProvider, ExemplarStore, HttpChatBackend, HttpEmbeddingProvider, ImageSource, Instance,
    MockBackend, PipelineConfig, Providers, Scenario, Split, TemplateSet,
};

type S = DefaultScalar;

#[derive(Parser)]
#[command(name = "stancedet", version, about = "Multimodal multi-agent stance detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and persist an exemplar store from a labeled split.
    BuildDb(BuildDbArgs),
    /// Classify one instance and print the verdict as JSON.
    Classify(ClassifyArgs),
    /// Evaluate one configuration on a dataset split.
    Eval(EvalArgs),
    /// Stage ablations, or agent-contribution configs with --agents.
    Ablate(AblateArgs),
    /// Sweep retrieval depth and debate rounds.
    Sweep(SweepArgs),
    /// Retrieval-noise study.
    Noise(NoiseArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageFlag {
    Ra,
    Ma,
    Red,
    Sra,
}

#[derive(Args)]
struct PipelineArgs {
    /// JSON pipeline config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    noise_p: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    parallelism: Option<usize>,
    /// Disable a pipeline stage (repeatable).
    #[arg(long, value_enum)]
    disable_stage: Vec<StageFlag>,
}

#[derive(Args)]
struct BackendArgs {
    /// Scripted mock backend (JSON); replaces the HTTP model backend.
    #[arg(long)]
    mock_script: Option<PathBuf>,
    /// Directory of prompt template overrides.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Precomputed embeddings (JSON Lines keyed by instance id).
    #[arg(long, conflicts_with = "embed_endpoint")]
    embeddings: Option<PathBuf>,
    /// Base URL of an embedding service.
    #[arg(long)]
    embed_endpoint: Option<String>,
    #[arg(long, default_value = "clip")]
    embed_model: String,
    /// Expected embedding dimension per modality.
    #[arg(long)]
    embed_dim: Option<usize>,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset split in JSON Lines.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Keep only rows with this target.
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    dataset_name: Option<String>,
    /// Zero-shot run holding out this target.
    #[arg(long)]
    zero_shot: Option<String>,
    #[arg(long)]
    store: Option<PathBuf>,
    /// Output directory for reports.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildDbArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    dataset_name: Option<String>,
    /// Manifest timestamp (RFC 3339); defaults to now.
    #[arg(long)]
    created_at: Option<String>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    text: String,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    target: String,
    /// Instance id, used to look up precomputed embeddings.
    #[arg(long, default_value = "query")]
    id: String,
    #[arg(long)]
    store: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct AblateArgs {
    /// Run the analysis-agent configurations instead of stage ablations.
    #[arg(long)]
    agents: bool,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,7")]
    k_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    rounds_grid: Vec<u32>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct NoiseArgs {
    #[arg(long, value_delimiter = ',')]
    p_grid: Vec<f64>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    backend: BackendArgs,
}

/// Bad flag combinations found after parsing; reported with exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// `Ok(false)` means the command finished with some failed instances or cells.
fn run(command: Command) -> Result<bool> {
    match command {
        Command::BuildDb(a) => build_db(a),
        Command::Classify(a) => classify_one(a),
        Command::Eval(a) => {
            let env = Env::new(&a.pipeline, &a.backend, a.data.store.as_deref())?;
            evaluate(&env, &a.data)
        }
        Command::Ablate(a) => {
            let env = Env::new(&a.pipeline, &a.backend, a.data.store.as_deref())?;
            study(&env, &a.data, |cfg, sc, store, p, split| {
                if a.agents {
                    run_agent_contributions(cfg, sc, store, p, split)
                } else {
                    run_ablation(cfg, sc, store, p, split)
                }
            })
        }
        Command::Sweep(a) => {
            let env = Env::new(&a.pipeline, &a.backend, a.data.store.as_deref())?;
            study(&env, &a.data, |cfg, sc, store, p, split| {
                run_sensitivity(cfg, sc, store, p, split, &a.k_grid, &a.rounds_grid)
            })
        }
        Command::Noise(a) => {
            let grid = if a.p_grid.is_empty() { NOISE_GRID.to_vec() } else { a.p_grid.clone() };
            if let Some(p) = grid.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(usage(format!("--p-grid: {p} outside [0, 1]")));
            }
            let env = Env::new(&a.pipeline, &a.backend, a.data.store.as_deref())?;
            study(&env, &a.data, |cfg, sc, store, p, split| run_noise_study(cfg, sc, store, p, split, &grid))
        }
    }
}

fn pipeline_config(args: &PipelineArgs) -> Result<PipelineConfig> {
    let mut config = match &args.config {
        Some(path) => PipelineConfig::load(path).map_err(|e| usage(format!("--config {}: {e}", path.display())))?,
        None => PipelineConfig::default(),
    };
    if let Some(k) = args.k {
        config.k = k;
    }
    if let Some(r) = args.rounds {
        config.rounds = r;
    }
    if let Some(p) = args.noise_p {
        config.noise_p = p;
    }
    if let Some(s) = args.seed {
        config.rng_seed = s;
    }
    if let Some(n) = args.parallelism {
        config.parallelism = n;
    }
    for stage in &args.disable_stage {
        match stage {
            StageFlag::Ra => config.enable_ra = false,
            StageFlag::Ma => config.enable_ma = false,
            StageFlag::Red => config.enable_red = false,
            StageFlag::Sra => config.enable_sra = false,
        }
    }
    if let Ok(model) = std::env::var("MODEL_ID") {
        if !model.is_empty() {
            for params in [
                &mut config.models.analysis,
                &mut config.models.debate,
                &mut config.models.adjudication,
                &mut config.models.cot,
            ] {
                params.model_id = model.clone();
            }
        }
    }
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

/// Backends, templates and the optional store shared by every subcommand.
struct Env {
    config: PipelineConfig,
    chat: Box<dyn ChatBackend>,
    embedder: Option<Box<dyn EmbeddingProvider<S>>>,
    templates: TemplateSet,
    store: Option<ExemplarStore<S>>,
}

impl Env {
    fn new(pipeline: &PipelineArgs, backend: &BackendArgs, store: Option<&Path>) -> Result<Env> {
        let config = pipeline_config(pipeline)?;
        let chat: Box<dyn ChatBackend> = match &backend.mock_script {
            Some(path) => {
                let script = MockScript::load(path).with_context(|| format!("--mock-script {}", path.display()))?;
                Box::new(MockBackend::from_script(script))
            }
            None => {
                let Some(http) = HttpChatConfig::from_env() else {
                    return Err(usage("no model backend: set MODEL_ENDPOINT or pass --mock-script"));
                };
                Box::new(HttpChatBackend::new(http)?)
            }
        };
        let embedder: Option<Box<dyn EmbeddingProvider<S>>> = match (&backend.embeddings, &backend.embed_endpoint) {
            (Some(path), _) => Some(Box::new(
                PrecomputedEmbeddings::load(path, &backend.embed_model, backend.embed_dim)
                    .with_context(|| format!("--embeddings {}", path.display()))?,
            )),
            (None, Some(url)) => {
                let dim = backend.embed_dim.ok_or_else(|| usage("--embed-endpoint requires --embed-dim"))?;
                let cfg = EmbeddingProviderConfig::new(url, &backend.embed_model, dim)?;
                Some(Box::new(HttpEmbeddingProvider::new(cfg)?))
            }
            (None, None) => None,
        };
        let templates = match &backend.templates {
            Some(dir) => TemplateSet::from_dir(dir).with_context(|| format!("--templates {}", dir.display()))?,
            None => TemplateSet::stock(),
        };
        let store = match store {
            Some(dir) => {
                let s = load_store::<S>(dir).with_context(|| format!("--store {}", dir.display()))?;
                log::info!("loaded store of {} exemplars from {}", s.len(), dir.display());
                Some(s)
            }
            None => None,
        };
        if store.is_some() && config.retrieves() && embedder.is_none() {
            return Err(usage("retrieval needs query embeddings: pass --embeddings or --embed-endpoint"));
        }
        Ok(Env {
            config,
            chat,
            embedder,
            templates,
            store,
        })
    }

    fn providers(&self) -> Providers<'_, S> {
        Providers {
            chat: self.chat.as_ref(),
            embedder: self.embedder.as_deref(),
            templates: &self.templates,
        }
    }
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse().map_err(|e: stancedet::Error| usage(format!("--split: {e}")))
}

fn dataset_name(name: &Option<String>, path: &Path) -> String {
    name.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    })
}

fn build_db(a: BuildDbArgs) -> Result<bool> {
    let env = Env::new(&a.pipeline, &a.backend, None)?;
    let Some(embedder) = env.embedder.as_deref() else {
        return Err(usage("build-db needs --embeddings or --embed-endpoint"));
    };
    let name = dataset_name(&a.dataset_name, &a.train);
    let split = load_dataset(&a.train, &name, a.target.as_deref(), Split::Train)
        .with_context(|| format!("--train {}", a.train.display()))?;
    let params: &ModelParams = &env.config.models;
    let ctx = AgentContext::new(env.chat.as_ref(), &env.templates, params);
    let options = BuildOptions {
        created_at: a.created_at.clone(),
        ..Default::default()
    };
    let mut trace = CallTrace::default();
    let store = build_store(&split.rows, embedder, &ctx, &options, &mut trace)?;
    save_store(&store, &a.out).with_context(|| format!("writing store to {}", a.out.display()))?;
    log::info!("wrote {} exemplars to {} ({} model calls)", store.len(), a.out.display(), trace.len());
    println!("{}", serde_json::to_string_pretty(store.manifest())?);
    Ok(true)
}

fn classify_one(a: ClassifyArgs) -> Result<bool> {
    let env = Env::new(&a.pipeline, &a.backend, a.store.as_deref())?;
    if !a.image.exists() {
        return Err(usage(format!("--image {}: no such file", a.image.display())));
    }
    let instance = Instance::new(a.id.clone(), ImageSource::File(a.image.clone()), a.text.clone(), a.target.clone())
        .map_err(|e| usage(e.to_string()))?;
    let verdict = classify(&env.config, env.store.as_ref(), &env.providers(), &instance)?;
    let record = VerdictRecord::new(&instance.id, &verdict);
    println!("{}", serde_json::to_string_pretty(&record)?);
    Ok(true)
}

fn scenario(data: &DataArgs) -> Scenario {
    match &data.zero_shot {
        Some(t) => Scenario::ZeroShot {
            held_out_target: t.clone(),
        },
        None => Scenario::InTarget,
    }
}

fn load_split(data: &DataArgs) -> Result<stancedet::eval::DatasetSplit> {
    let split = parse_split(&data.split)?;
    let name = dataset_name(&data.dataset_name, &data.data);
    load_dataset(&data.data, &name, data.target.as_deref(), split).with_context(|| format!("--data {}", data.data.display()))
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn evaluate(env: &Env, data: &DataArgs) -> Result<bool> {
    let split = load_split(data)?;
    let (report, manifest) = run_experiment(
        "eval",
        &env.config,
        &scenario(data),
        env.store.as_ref(),
        &env.providers(),
        &split,
    )?;
    fs::create_dir_all(&data.out)?;
    let table = StudyTable {
        study: "eval".into(),
        rows: vec![StudyRow {
            name: report.name.clone(),
            k: Some(env.config.k),
            rounds: Some(env.config.rounds),
            noise_p: Some(env.config.noise_p),
            report: Some(report.clone()),
            error: None,
        }],
    };
    write(&data.out, "report.json", &report.to_json())?;
    write(&data.out, "report.txt", &table.render_text())?;
    write(&data.out, "report.csv", &table.to_csv())?;
    write(&data.out, "run_manifest.json", &serde_json::to_string_pretty(&manifest)?)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "macro_f1": report.macro_f1,
            "evaluated": report.evaluated,
            "errors": report.errors,
            "unparseable_fallbacks": report.unparseable_fallbacks,
            "model_calls": report.model_calls,
            "total_tokens": report.total_tokens,
        }))?
    );
    if report.errors > 0 {
        log::warn!("{} of {} instances failed", report.errors, split.len());
    }
    Ok(report.errors == 0)
}

fn study<F>(env: &Env, data: &DataArgs, runner: F) -> Result<bool>
where
    F: Fn(
        &PipelineConfig,
        &Scenario,
        Option<&ExemplarStore<S>>,
        &Providers<'_, S>,
        &stancedet::eval::DatasetSplit,
    ) -> stancedet::Result<StudyTable>,
{
    let split = load_split(data)?;
    let table = runner(&env.config, &scenario(data), env.store.as_ref(), &env.providers(), &split)?;
    fs::create_dir_all(&data.out)?;
    let stem = table.study.clone();
    write(&data.out, &format!("{stem}.json"), &table.to_json())?;
    write(&data.out, &format!("{stem}.txt"), &table.render_text())?;
    write(&data.out, &format!("{stem}.csv"), &table.to_csv())?;
    eprint!("{}", table.render_text());
    let failed: BTreeSet<&str> = table.rows.iter().filter(|r| r.error.is_some()).map(|r| r.name.as_str()).collect();
    let partial = table
        .rows
        .iter()
        .filter_map(|r| r.report.as_ref())
        .any(|r| r.errors > 0);
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "study": table.study,
            "rows": table.rows.iter().map(|r| serde_json::json!({
                "name": r.name,
                "macro_f1": r.report.as_ref().map(|x| x.macro_f1),
                "error": r.error,
            })).collect::<Vec<_>>(),
        }))?
    );
    if !failed.is_empty() {
        log::warn!("failed cells: {}", failed.into_iter().collect::<Vec<_>>().join(", "));
        return Ok(false);
    }
    Ok(!partial)
}
