//! `cdmfill`: derive templates, build knowledge bases, populate and score
//! structured representations of derivative contracts.
//!
//! Exit codes: 0 success, 1 domain error (a JSON object with `error` and
//! `message` is printed on stderr), 2 usage or configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use cdmfill_core::config::{RunConfig, DEFAULT_CHUNK_BUDGET};
use cdmfill_core::eval::{self, CoverageWeights};
use cdmfill_core::io::{write_atomic, write_json};
use cdmfill_core::kb::{self, KnowledgeBase};
use cdmfill_core::llm::{
    synthesize_description, ChatProvider, EmbeddingProvider, HttpChatProvider, HttpEmbeddingProvider, MockEmbedder,
    MockProvider, ProviderConfig,
};
use cdmfill_core::pipeline::{self, PipelineSettings};
use cdmfill_core::populate::{self, PopulationConfig, Populator};
use cdmfill_core::schema::load_schema_dir;
use cdmfill_core::template::{build_template, flatten_examples, Template};
use cdmfill_core::Error;

const MOCK_EMBED_DIM: usize = 64;

#[derive(Parser, Debug)]
#[command(name = "cdmfill", version, about = "Template-driven conversion of contract descriptions into CDM JSON")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Run configuration file (TOML). Flags and environment variables take precedence over it.
    #[arg(long, global = true, env = "CDMFILL_CONFIG")]
    config: Option<PathBuf>,
    /// Answer every model call from this mock script instead of a live provider.
    #[arg(long, global = true, env = "CDMFILL_MOCK_SCRIPT")]
    mock_script: Option<PathBuf>,
    /// OpenAI-compatible endpoint base URL.
    #[arg(long, global = true, env = "CDMFILL_ENDPOINT")]
    endpoint: Option<String>,
    #[arg(long, global = true, env = "CDMFILL_MODEL")]
    model: Option<String>,
    /// Name of the environment variable holding the API key.
    #[arg(long, global = true)]
    credential_env: Option<String>,
    #[arg(long, global = true)]
    timeout_secs: Option<f64>,
    /// Transport retries per provider call.
    #[arg(long, global = true)]
    provider_retries: Option<u32>,
    /// Maximum concurrent provider calls.
    #[arg(long, global = true, env = "CDMFILL_MAX_IN_FLIGHT")]
    max_in_flight: Option<usize>,
    /// Log filter, e.g. `info` or `cdmfill_core=debug`.
    #[arg(long, global = true, env = "CDMFILL_LOG", default_value = "warn")]
    log: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Derive a pruned template from a schema directory and example instances.
    MakeTemplate {
        #[arg(long)]
        schema_dir: PathBuf,
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        examples: PathBuf,
        #[arg(long)]
        contract_type: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Chunk example instances into a knowledge base.
    IngestKb {
        #[arg(long)]
        examples: PathBuf,
        #[arg(long)]
        contract_type: String,
        #[arg(long, default_value_t = DEFAULT_CHUNK_BUDGET)]
        budget: usize,
        #[arg(long)]
        out: PathBuf,
        /// Embed every chunk and switch retrieval to cosine similarity.
        #[arg(long)]
        embed: bool,
        /// Embedding endpoint; defaults to the chat endpoint.
        #[arg(long, requires = "embed")]
        provider: Option<String>,
        #[arg(long, requires = "embed")]
        embedding_model: Option<String>,
    },
    /// Fill a template task by task and write the cleaned document.
    Populate {
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        contract: PathBuf,
        #[command(flatten)]
        rag: RagArgs,
        #[arg(long)]
        depth: Option<usize>,
        /// Follow-up prompts allowed after a shape mismatch.
        #[arg(long)]
        retry_limit: Option<u32>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        provenance: Option<PathBuf>,
        /// Write the populated tree without removing unfilled fields.
        #[arg(long)]
        no_clean: bool,
    },
    /// Generate a whole representation from one prompt.
    Baseline {
        #[arg(long)]
        contract: PathBuf,
        #[command(flatten)]
        rag: RagArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a natural-language contract description for a structured example.
    Synthesize {
        #[arg(long)]
        cdm: PathBuf,
        /// Reference term sheets to imitate.
        #[arg(long = "reference")]
        references: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a representation against the schema and the contract text.
    Evaluate {
        #[arg(long)]
        contract: PathBuf,
        #[arg(long)]
        cdm: PathBuf,
        #[arg(long)]
        schema_dir: Option<PathBuf>,
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        /// Skip the model-guided coverage step.
        #[arg(long)]
        no_coverage: bool,
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        contract_type: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate evaluation reports into mean and standard deviation per group.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = GroupBy::ContractType)]
        group_by: GroupBy,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run template derivation, population and evaluation for a batch of contracts.
    Pipeline {
        /// Batch configuration; defaults to --config.
        config_file: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        rag: bool,
        #[arg(long)]
        no_coverage: bool,
    },
}

#[derive(Args, Debug)]
struct RagArgs {
    /// Knowledge base file produced by `ingest-kb`.
    #[arg(long)]
    kb: Option<PathBuf>,
    /// Add retrieved example chunks to every prompt. Requires --kb.
    #[arg(long, requires = "kb")]
    rag: bool,
    /// Chunks per prompt.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GroupBy {
    ContractType,
}

/// Usage or configuration problems, reported with exit code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// A domain failure without a library error value behind it.
#[derive(Debug)]
struct Domain {
    kind: &'static str,
    message: String,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Domain {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

struct Ctx {
    global: Global,
    file: RunConfig,
}

impl Ctx {
    fn load(global: Global, explicit: Option<&Path>) -> anyhow::Result<Self> {
        let path = explicit.map(Path::to_path_buf).or_else(|| global.config.clone());
        let file = match path {
            Some(p) => RunConfig::load(&p).map_err(|e| usage(format!("{}: {e}", e.kind())))?,
            None => RunConfig::default(),
        };
        Ok(Ctx { global, file })
    }

    fn provider_config(&self) -> anyhow::Result<ProviderConfig> {
        let mut cfg = self.file.provider_config()?;
        let g = &self.global;
        if let Some(e) = &g.endpoint {
            cfg.endpoint = e.clone();
        }
        if let Some(m) = &g.model {
            cfg.model_name = m.clone();
        }
        if let Some(c) = &g.credential_env {
            cfg.credential_ref = Some(c.clone());
        }
        if let Some(t) = g.timeout_secs {
            if !(t.is_finite() && t > 0.0) {
                return Err(usage("--timeout-secs must be positive"));
            }
            cfg.timeout = std::time::Duration::from_secs_f64(t);
        }
        if let Some(r) = g.provider_retries {
            cfg.retry_limit = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn mock_script(&self) -> Option<PathBuf> {
        self.global.mock_script.clone().or_else(|| self.file.mock_script.clone())
    }

    fn chat(&self) -> anyhow::Result<Box<dyn ChatProvider>> {
        match self.mock_script() {
            Some(path) => Ok(Box::new(MockProvider::from_file(&path)?)),
            None => Ok(Box::new(HttpChatProvider::new(self.provider_config()?)?)),
        }
    }

    fn population(&self) -> PopulationConfig {
        let mut p = self.file.population();
        if let Some(n) = self.global.max_in_flight {
            p.max_in_flight = n;
        }
        p
    }

    fn weights(&self, mu: Option<f64>, epsilon: Option<f64>) -> anyhow::Result<CoverageWeights> {
        let base = self.file.weights()?;
        Ok(CoverageWeights::new(mu.unwrap_or(base.mu), epsilon.unwrap_or(base.epsilon))?)
    }
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).map_err(|e| {
        anyhow::Error::new(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn read_json(path: &Path) -> anyhow::Result<Value> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| {
        anyhow::Error::new(Error::MalformedDocument {
            file: path.to_path_buf(),
            offset: 0,
            message: e.to_string(),
        })
    })
}

fn load_kb(rag: &RagArgs, ctx: &Ctx) -> anyhow::Result<Option<KnowledgeBase>> {
    let path = rag.kb.clone().or_else(|| ctx.file.kb_path.clone());
    match path {
        Some(p) if rag.rag || rag.kb.is_some() => Ok(Some(KnowledgeBase::load(&p)?)),
        _ => Ok(None),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let explicit = match &cli.command {
        Command::Pipeline { config_file, .. } => config_file.clone(),
        _ => None,
    };
    let ctx = Ctx::load(cli.global, explicit.as_deref())?;
    match cli.command {
        Command::MakeTemplate {
            schema_dir,
            root,
            examples,
            contract_type,
            out,
        } => {
            let index = load_schema_dir(&schema_dir, &root)?;
            let keys = flatten_examples(&examples)?;
            let template = build_template(&index, &keys, &contract_type)?;
            let stats = template.stats();
            tracing::info!(
                leaves = stats.leaf_count,
                max_depth = stats.max_depth,
                objects = stats.object_count,
                "template built"
            );
            write_atomic(&out, (template.to_pretty_json() + "\n").as_bytes())?;
        }
        Command::IngestKb {
            examples,
            contract_type,
            budget,
            out,
            embed,
            provider,
            embedding_model,
        } => {
            let mut kb = kb::ingest_examples(&examples, &contract_type, budget)?;
            if embed {
                let cap = ctx.population().max_in_flight;
                kb = if ctx.mock_script().is_some() && provider.is_none() {
                    kb::embed_corpus(&kb, &MockEmbedder::new(MOCK_EMBED_DIM), cap)?
                } else {
                    let mut cfg = ctx.provider_config()?;
                    if let Some(p) = provider {
                        cfg.endpoint = p;
                    }
                    if let Some(m) = embedding_model.or_else(|| ctx.file.provider.as_ref().and_then(|p| p.embedding_model.clone())) {
                        cfg.model_name = m;
                    }
                    let embedder: Box<dyn EmbeddingProvider> = Box::new(HttpEmbeddingProvider::new(cfg)?);
                    kb::embed_corpus(&kb, embedder.as_ref(), cap)?
                };
            }
            tracing::info!(chunks = kb.len(), "knowledge base written");
            kb.save(&out)?;
        }
        Command::Populate {
            template,
            contract,
            rag,
            depth,
            retry_limit,
            out,
            provenance,
            no_clean,
        } => {
            let template = Template::load(&template)?;
            let text = read_text(&contract)?;
            let mut cfg = ctx.population();
            if let Some(d) = depth {
                cfg.depth_threshold = d;
            }
            if let Some(r) = retry_limit {
                cfg.retry_limit = r;
            }
            if let Some(k) = rag.k {
                cfg.k_chunks = k;
            }
            cfg.use_rag = rag.rag;
            cfg.validate().map_err(|e| usage(e.to_string()))?;
            let kb = load_kb(&rag, &ctx)?;
            let provider = ctx.chat()?;
            let embedder = MockEmbedder::new(MOCK_EMBED_DIM);
            let embedder: Option<&dyn EmbeddingProvider> = match (&kb, ctx.mock_script()) {
                (Some(k), Some(_)) if k.scorer == kb::Scorer::Embedding => Some(&embedder),
                _ => None,
            };
            let result = Populator::new(provider.as_ref(), &cfg)
                .with_kb(kb.as_ref())
                .with_embedder(embedder)
                .run(&template, &text);
            let doc = match result {
                Ok(doc) => doc,
                Err(e) => {
                    if let Some(p) = &provenance {
                        write_json(p, &e.provenance)?;
                    }
                    return Err(e.source.into());
                }
            };
            if let Some(p) = &provenance {
                write_json(p, &doc.provenance)?;
            }
            let tree = if no_clean { doc.tree.clone() } else { populate::clean(&doc.tree) };
            write_json(&out, &tree)?;
            let failed: Vec<&str> = doc.provenance.failed().map(|t| t.target.as_str()).collect();
            if !failed.is_empty() {
                return Err(anyhow::Error::new(Domain {
                    kind: "ShapeMismatch",
                    message: format!(
                        "no valid answer after all attempts for {}; placeholders kept",
                        failed.join(", ")
                    ),
                }));
            }
        }
        Command::Baseline { contract, rag, out } => {
            let text = read_text(&contract)?;
            let mut cfg = ctx.population();
            cfg.use_rag = rag.rag;
            if let Some(k) = rag.k {
                cfg.k_chunks = k;
            }
            cfg.validate().map_err(|e| usage(e.to_string()))?;
            let kb = load_kb(&rag, &ctx)?;
            let provider = ctx.chat()?;
            let doc = populate::baseline_generate(&text, kb.as_ref(), provider.as_ref(), &cfg)?;
            write_json(&out, &doc)?;
        }
        Command::Synthesize { cdm, references, out } => {
            let example = read_json(&cdm)?;
            let refs = references.iter().map(|p| read_text(p)).collect::<anyhow::Result<Vec<_>>>()?;
            let provider = ctx.chat()?;
            let text = synthesize_description(provider.as_ref(), &example, &refs)?;
            write_atomic(&out, format!("{text}\n").as_bytes())?;
        }
        Command::Evaluate {
            contract,
            cdm,
            schema_dir,
            root,
            mu,
            epsilon,
            no_coverage,
            id,
            contract_type,
            out,
        } => {
            let schema_dir = schema_dir
                .or_else(|| ctx.file.schema_dir.clone())
                .ok_or_else(|| usage("--schema-dir is required"))?;
            let root = root
                .or_else(|| ctx.file.root.clone())
                .ok_or_else(|| usage("--root is required"))?;
            let weights = ctx.weights(mu, epsilon).map_err(|e| usage(e.to_string()))?;
            let index = load_schema_dir(&schema_dir, &root)?;
            let text = read_text(&contract)?;
            let doc = read_json(&cdm)?;
            let id = id.unwrap_or_else(|| {
                contract
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "contract".into())
            });
            let contract_type = contract_type.unwrap_or_else(|| "unknown".into());
            let provider = if no_coverage || ctx.file.coverage == Some(false) {
                None
            } else {
                Some(ctx.chat()?)
            };
            let report = eval::evaluate(
                &id,
                &contract_type,
                &text,
                &doc,
                &index,
                &weights,
                provider.as_deref(),
            )?;
            write_json(&out, &report)?;
        }
        Command::Report { input, group_by, out } => {
            let GroupBy::ContractType = group_by;
            let reports = pipeline::load_reports(&input)?;
            if reports.is_empty() {
                return Err(Error::EmptyGroup(input.display().to_string()).into());
            }
            let rows = eval::aggregate(&reports)?;
            write_atomic(&out, eval::summary_csv(&rows)?.as_bytes())?;
        }
        Command::Pipeline {
            config_file: _,
            out_dir,
            depth,
            rag,
            no_coverage,
        } => {
            let f = &ctx.file;
            let schema_dir = f.schema_dir.clone().ok_or_else(|| usage("config lacks `schema_dir`"))?;
            let root = f.root.clone().ok_or_else(|| usage("config lacks `root`"))?;
            let out_dir = out_dir
                .or_else(|| f.out_dir.clone())
                .ok_or_else(|| usage("no output directory: set `out_dir` or pass --out-dir"))?;
            let mut settings = PipelineSettings::new(schema_dir, root, out_dir);
            settings.examples_dir = f.examples_dir.clone();
            settings.kb_path = f.kb_path.clone();
            settings.population = ctx.population();
            if let Some(d) = depth {
                settings.population.depth_threshold = d;
            }
            settings.population.use_rag |= rag;
            settings.weights = ctx.weights(None, None).map_err(|e| usage(e.to_string()))?;
            settings.chunk_budget = f.chunk_budget.unwrap_or(DEFAULT_CHUNK_BUDGET);
            settings.coverage = f.coverage.unwrap_or(true) && !no_coverage;
            settings.contracts = f.contracts.clone();
            if settings.contracts.is_empty() {
                return Err(usage("the contract batch is empty"));
            }
            settings.population.validate().map_err(|e| usage(e.to_string()))?;
            let provider = ctx.chat()?;
            let summary = pipeline::run_pipeline(&settings, provider.as_ref())?;
            let failed = summary.results.iter().filter(|r| r.error.is_some()).count();
            tracing::info!(contracts = summary.results.len(), failed, "pipeline finished");
            println!("{}", eval::summary_csv(&summary.groups)?.trim_end());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> (u8, Value) {
    if let Some(u) = err.downcast_ref::<Usage>() {
        return (2, json!({"error": "UsageError", "message": u.0}));
    }
    if let Some(d) = err.downcast_ref::<Domain>() {
        return (1, json!({"error": d.kind, "message": d.message}));
    }
    if let Some(e) = err.downcast_ref::<Error>() {
        let code = if matches!(e, Error::Config(_)) { 2 } else { 1 };
        return (code, json!({"error": e.kind(), "message": e.to_string()}));
    }
    (1, json!({"error": "Error", "message": format!("{err:#}")}))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = tracing_subscriber::EnvFilter::try_new(&cli.global.log)
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
    match run(cli).context("cdmfill failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, body) = exit_code(&err);
            eprintln!("{body}");
            ExitCode::from(code)
        }
    }
}
