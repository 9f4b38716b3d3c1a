//! `errsight` command line: argument model, config resolution and dispatch.

pub mod http;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use errsight_core::config::{ChatBackendKind, EmbeddingBackendKind};
use errsight_core::evaluation::{leakage_audit, reports_to_csv};
use errsight_core::management::Feedback;
use errsight_core::model::{annotated_corpus, load_corpus, read_jsonl, write_jsonl};
use errsight_core::store::SchemaCache;
use errsight_core::{Engine, EngineConfig, Error, ErrorAnnotation, EvalMode, Result, StepBase, Trajectory, TrajectoryFormat};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "errsight", version, about = "Decisive-error recognition for multi-agent trajectories")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cluster an annotated corpus and distill one schema per cluster into the store.
    Extract(ExtractArgs),
    /// Diagnose one failed trajectory.
    Recognize(RecognizeArgs),
    /// Submit feedback on a diagnosed trajectory.
    Feedback(FeedbackArgs),
    /// Build a synthetic failure corpus from successful runs and seed failures.
    Inject(InjectArgs),
    /// Score the detector on an annotated corpus.
    Eval(EvalArgs),
    /// Inspect the schema store.
    Store(StoreArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Canonical,
    WhoWhen,
}

impl From<FormatArg> for TrajectoryFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Canonical => TrajectoryFormat::CanonicalJson,
            FormatArg::WhoWhen => TrajectoryFormat::WhoWhenJson,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackendArg {
    Openai,
    Replay,
    Record,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EmbeddingArg {
    Hashed,
    Remote,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StepBaseArg {
    Zero,
    One,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    ZeroShot,
    SchemaGuided,
}

/// Config file plus overrides shared by every subcommand. Flags win.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Schema store (JSONL).
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    /// Chat backend.
    #[arg(long, value_enum, global = true)]
    pub backend: Option<BackendArg>,
    /// Replay tape for the replay and record backends.
    #[arg(long, global = true)]
    pub tape: Option<PathBuf>,
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[arg(long, global = true)]
    pub base_url: Option<String>,
    #[arg(long, value_enum, global = true)]
    pub embedding: Option<EmbeddingArg>,
    #[arg(long, global = true)]
    pub embedding_dim: Option<usize>,
    /// Step numbering of Who&When inputs and detector answers.
    #[arg(long, value_enum, global = true)]
    pub step_base: Option<StepBaseArg>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Trajectories: a JSONL file, a JSON file or a directory of JSON files.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Annotation JSONL; required unless the corpus embeds annotations.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "canonical")]
    pub format: FormatArg,
    /// Average-linkage merge threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Write the build report here instead of stdout.
    #[arg(long)]
    pub report_out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct RecognizeArgs {
    #[arg(long)]
    pub trajectory: PathBuf,
    #[arg(long, value_enum, default_value = "canonical")]
    pub format: FormatArg,
    /// Schemata to retrieve.
    #[arg(long)]
    pub k: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct FeedbackArgs {
    /// Feedback JSON file, or `-` for stdin.
    #[arg(long)]
    pub feedback: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct InjectArgs {
    /// Successful trajectories.
    #[arg(long)]
    pub successes: PathBuf,
    /// Annotated seed failures.
    #[arg(long)]
    pub seeds: PathBuf,
    /// Annotation JSONL for the seeds, unless embedded.
    #[arg(long)]
    pub seed_annotations: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "canonical")]
    pub format: FormatArg,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub planner_model: Option<String>,
    #[arg(long)]
    pub injector_model: Option<String>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "canonical")]
    pub format: FormatArg,
    #[arg(long, value_enum, default_value = "schema-guided")]
    pub mode: ModeArg,
    /// Retrieval depth in schema-guided mode.
    #[arg(long)]
    pub k: Option<usize>,
    /// Comma-separated offsets to report, e.g. 0,1,3,5.
    #[arg(long, value_delimiter = ',')]
    pub k_list: Option<Vec<usize>>,
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    /// Report JSON; stdout when absent.
    #[arg(long)]
    pub report_out: Option<PathBuf>,
    #[arg(long)]
    pub csv_out: Option<PathBuf>,
    /// Per-trajectory records (JSONL).
    #[arg(long)]
    pub records_out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct StoreArgs {
    #[command(subcommand)]
    pub action: StoreAction,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Subcommand)]
pub enum StoreAction {
    /// Size, backend and content hash.
    Info,
    /// One line per schema with access statistics.
    List,
    /// Full entry for one schema.
    Show { id: String },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    #[command(flatten)]
    pub common: Common,
}

impl Common {
    /// Loads the config file (or defaults) and applies flag overrides.
    pub fn resolve(&self) -> Result<EngineConfig> {
        let mut cfg = match &self.config {
            Some(path) => EngineConfig::load(path)?,
            None => EngineConfig::default(),
        };
        if let Some(s) = &self.store {
            cfg.store_path = s.clone();
        }
        if let Some(b) = self.backend {
            cfg.chat_backend = match b {
                BackendArg::Openai => ChatBackendKind::Openai,
                BackendArg::Replay => ChatBackendKind::Replay,
                BackendArg::Record => ChatBackendKind::Record,
            };
        }
        if let Some(t) = &self.tape {
            cfg.replay_tape = Some(t.clone());
        }
        if let Some(m) = &self.model {
            cfg.chat_model = m.clone();
        }
        if let Some(u) = &self.base_url {
            cfg.chat_base_url = u.clone();
        }
        if let Some(e) = self.embedding {
            cfg.embedding_backend = match e {
                EmbeddingArg::Hashed => EmbeddingBackendKind::Hashed,
                EmbeddingArg::Remote => EmbeddingBackendKind::Remote,
            };
        }
        if let Some(d) = self.embedding_dim {
            cfg.embedding_dim = d;
        }
        if let Some(b) = self.step_base {
            cfg.step_base = match b {
                StepBaseArg::Zero => StepBase::ZeroBased,
                StepBaseArg::One => StepBase::OneBased,
            };
        }
        if cfg.chat_api_key.is_none() {
            cfg.chat_api_key = std::env::var("OPENAI_API_KEY").ok();
        }
        cfg.check()?;
        Ok(cfg)
    }
}

fn load_annotated(
    corpus: &Path,
    annotations: Option<&Path>,
    format: FormatArg,
    base: StepBase,
) -> Result<Vec<(Trajectory, ErrorAnnotation)>> {
    let parsed = load_corpus(corpus, format.into(), base)?;
    let anns = annotations.map(read_jsonl::<ErrorAnnotation>).transpose()?;
    annotated_corpus(parsed, anns)
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Internal(e.to_string()))
}

fn emit<T: Serialize>(v: &T, out: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    let text = to_json(v)? + "\n";
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => stdout.write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Runs one parsed command, writing data to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Extract(a) => {
            let cfg = a.common.resolve()?;
            let corpus = load_annotated(&a.corpus, a.annotations.as_deref(), a.format, cfg.step_base)?;
            let engine = Engine::open(cfg)?;
            let report = engine.extract(&corpus, a.threshold)?;
            emit(&report, a.report_out.as_deref(), stdout)
        }
        Command::Recognize(a) => {
            let cfg = a.common.resolve()?;
            let raw = std::fs::read(&a.trajectory)?;
            let t = errsight_core::model::parse_trajectory_with(&raw, a.format.into(), cfg.step_base)?.trajectory;
            let k = a.k.unwrap_or(cfg.k);
            if k == 0 {
                return Err(Error::InvalidInput("k must be >= 1".into()));
            }
            let engine = Engine::open(cfg)?;
            let d = engine.recognize_detailed(&t, k)?.diagnosis;
            emit(&d, None, stdout)
        }
        Command::Feedback(a) => {
            let cfg = a.common.resolve()?;
            let raw = if a.feedback.as_os_str() == "-" {
                let mut buf = Vec::new();
                std::io::Read::read_to_end(&mut std::io::stdin(), &mut buf)?;
                buf
            } else {
                std::fs::read(&a.feedback)?
            };
            let fb: Feedback = serde_json::from_slice(&raw).map_err(|e| Error::Parse { offset: 0, message: e.to_string() })?;
            let engine = Engine::open(cfg)?;
            let out = engine.feedback(fb)?;
            emit(&out, None, stdout)
        }
        Command::Inject(a) => {
            let mut cfg = a.common.resolve()?;
            if a.planner_model.is_some() {
                cfg.planner_model = a.planner_model.clone();
            }
            if a.injector_model.is_some() {
                cfg.injector_model = a.injector_model.clone();
            }
            let successes: Vec<Trajectory> =
                load_corpus(&a.successes, a.format.into(), cfg.step_base)?.into_iter().map(|p| p.trajectory).collect();
            let seeds = load_annotated(&a.seeds, a.seed_annotations.as_deref(), a.format, cfg.step_base)?;
            let engine = Engine::open(cfg)?;
            let manifest = engine.synthesize(&successes, &seeds, &a.out)?;
            emit(&manifest, None, stdout)
        }
        Command::Eval(a) => {
            let mut cfg = a.common.resolve()?;
            if let Some(k) = a.k {
                cfg.k = k;
            }
            if let Some(list) = &a.k_list {
                cfg.k_list = list.clone();
            }
            cfg.check()?;
            let corpus = load_annotated(&a.corpus, a.annotations.as_deref(), a.format, cfg.step_base)?;
            let mode = match a.mode {
                ModeArg::ZeroShot => EvalMode::ZeroShot,
                ModeArg::SchemaGuided => EvalMode::SchemaGuided,
            };
            if mode == EvalMode::SchemaGuided && !cfg.store_path.exists() {
                return Err(Error::NotFound(vec![cfg.store_path.display().to_string()]));
            }
            let engine = Engine::open(cfg)?;
            let out = engine.evaluate(&corpus, mode, a.runs)?;
            let audit = leakage_audit(&out.logs);
            if !audit.is_ok() {
                return Err(Error::Internal(format!("leakage audit failed: {:?}", audit.findings)));
            }
            if let Some(p) = &a.records_out {
                write_jsonl(p, &out.records)?;
            }
            if let Some(p) = &a.csv_out {
                let label = match mode {
                    EvalMode::ZeroShot => "zero_shot",
                    EvalMode::SchemaGuided => "schema_guided",
                };
                std::fs::write(p, reports_to_csv(&[(label, &out.report)])?)?;
            }
            emit(&out.report, a.report_out.as_deref(), stdout)
        }
        Command::Store(a) => {
            let cfg = a.common.resolve()?;
            let cache = SchemaCache::restore(&cfg.store_path)?;
            match a.action {
                StoreAction::Info => emit(
                    &serde_json::json!({
                        "path": cfg.store_path,
                        "size": cache.len(),
                        "backend_tag": cache.backend_tag(),
                        "dim": cache.dim(),
                        "content_hash": cache.content_hash(),
                    }),
                    None,
                    stdout,
                ),
                StoreAction::List => {
                    let list: Vec<errsight_core::engine::SchemaListing> =
                        cache.entries().iter().map(Into::into).collect();
                    emit(&list, None, stdout)
                }
                StoreAction::Show { id } => {
                    let e = cache.get(&id).ok_or_else(|| Error::NotFound(vec![id.clone()]))?;
                    emit(&e, None, stdout)
                }
            }
        }
        Command::Serve(a) => {
            let cfg = a.common.resolve()?;
            let engine = Arc::new(Engine::open(cfg)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(http::serve(engine, &a.bind))
        }
    }
}

/// Machine-readable error line for stderr.
pub fn error_json(e: &Error) -> String {
    serde_json::json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}
