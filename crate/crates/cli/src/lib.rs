//! Command implementations for the `ptmsel` binary.

use std::fmt::Write as _;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use ptmsel::card::{load_corpus, store_listings};
use ptmsel::config::{AppConfig, ConfigError};
use ptmsel::constraints::SpecialChecker;
use ptmsel::evaluation::{DeterministicJudge, EvalConfig, Judge, LlmJudge};
use ptmsel::extraction::ExtractionConfig;
use ptmsel::hub::HubClient;
use ptmsel::llm::ChatClient;
use ptmsel::pipeline::{
    ingest, load_requests, run_evaluate, run_extract, run_index, run_search, run_synthesize, write_ingest, PipelineError,
};
use ptmsel::selection::{explain, RankedMatch};
use ptmsel::similarity::Bm25Index;
use ptmsel::synthesis::SynthesisConfig;
use serde_json::json;

pub mod serve;

#[derive(Debug, Parser)]
#[command(name = "ptmsel", version, about = "Search pretrained models by template attributes")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse model cards and listings into a corpus file.
    Ingest {
        cards_dir: PathBuf,
        #[arg(long)]
        listings: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Fill literature attributes from card text.
    Extract {
        corpus: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Use the heuristic extractor even when an endpoint is configured.
        #[arg(long)]
        offline: bool,
    },
    /// Build the BM25 index for a corpus.
    Index {
        corpus: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Rank corpus models against the requests in a file.
    Search {
        index: PathBuf,
        corpus: PathBuf,
        request: PathBuf,
        #[arg(long)]
        top_k: Option<usize>,
        /// Append a per-match report.
        #[arg(long)]
        explain: bool,
        /// Print matches as JSON, one array per request.
        #[arg(long)]
        json: bool,
    },
    /// Generate search requests by mutating corpus records.
    Synthesize {
        corpus: PathBuf,
        #[arg(short = 'n', default_value_t = 3)]
        n: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        offline: bool,
    },
    /// Run a request set through selection and score the results.
    Evaluate {
        index: PathBuf,
        corpus: PathBuf,
        requests: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = JudgeKind::Heuristic)]
        judge: JudgeKind,
        /// Drop each request's origin model from its candidates.
        #[arg(long)]
        exclude_origins: bool,
    },
    /// Serve search over HTTP.
    Serve {
        /// Defaults to the configured index path.
        #[arg(long)]
        index: Option<PathBuf>,
        /// Defaults to the configured corpus path.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Fetch hub listings for model ids.
    FetchListing {
        #[arg(required = true)]
        names: Vec<String>,
        /// Listings file to write; stdout when omitted.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum JudgeKind {
    Heuristic,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    User,
    Internal,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn user(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::User,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Internal,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::User => 1,
            ErrorKind::Internal => 2,
        }
    }

    /// `{"error":{"kind":"user","message":"..."}}` on a single line.
    pub fn to_json_line(&self) -> String {
        let kind = match self.kind {
            ErrorKind::User => "user",
            ErrorKind::Internal => "internal",
        };
        json!({"error": {"kind": kind, "message": self.message}}).to_string()
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.is_user_error() {
            CliError::user(e.to_string())
        } else {
            CliError::internal(e.to_string())
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::user(e.to_string())
    }
}

pub fn load_config(path: Option<&Path>) -> Result<AppConfig, CliError> {
    match path {
        Some(p) => Ok(AppConfig::load(p)?),
        None => Ok(AppConfig::default()),
    }
}

fn client_for(config: &AppConfig, offline: bool) -> Result<Option<Arc<dyn ChatClient>>, CliError> {
    if offline || config.offline {
        return Ok(None);
    }
    let client = config.chat_client()?;
    if client.is_none() {
        log::info!("no chat endpoint configured; using deterministic fallbacks");
    }
    Ok(client)
}

fn checker_for(config: &AppConfig, client: Option<Arc<dyn ChatClient>>) -> SpecialChecker {
    let checker = SpecialChecker::deterministic(config.selection.policy);
    match client {
        Some(c) => checker.with_client(c),
        None => checker,
    }
}

fn load_index(path: &Path, config: &AppConfig) -> Result<Bm25Index, CliError> {
    Bm25Index::load_expecting(path, config.bm25, config.tokenizer)
        .map_err(|e| CliError::user(format!("{}: {e}", path.display())))
}

/// Renders the ranked table printed by `search`.
pub fn render_matches(request_id: &str, matches: &[RankedMatch], with_explain: bool) -> String {
    let mut out = format!("request {request_id}: {} matches\n", matches.len());
    let width = matches.iter().map(|m| m.registry_name.len()).max().unwrap_or(5).max(5);
    let _ = writeln!(out, "rank  similarity  {:<width$}  constraints", "model");
    for m in matches {
        let constraints = if m.verdicts.is_empty() {
            "-".to_string()
        } else {
            m.verdicts
                .iter()
                .map(|v| format!("{}={}", v.key, v.outcome))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(out, "{:>4}  {:>10.4}  {:<width$}  {constraints}", m.rank, m.similarity, m.registry_name);
    }
    if with_explain {
        for m in matches {
            out.push('\n');
            out.push_str(&explain(m));
        }
    }
    out
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    let config = load_config(cli.config.as_deref())?;
    let mut print = |text: &str| stdout.write_all(text.as_bytes()).map_err(|e| CliError::internal(e.to_string()));
    match cli.command {
        Command::Ingest { cards_dir, listings, out } => {
            let output = ingest(&cards_dir, listings.as_deref())?;
            for w in &output.warnings {
                log::warn!("{w}");
            }
            write_ingest(&output, &out)?;
            print(&format!("{}", output.stats))?;
        }
        Command::Extract { corpus, out, offline } => {
            let client = client_for(&config, offline)?;
            let records =
                run_extract(&corpus, &out, client.as_deref(), &ExtractionConfig::default(), config.parallelism)?;
            print(&format!("extracted {} records into {}\n", records.len(), out.display()))?;
        }
        Command::Index { corpus, out } => {
            let index = run_index(&corpus, &out, config.bm25, config.tokenizer)?;
            print(&format!("indexed {} documents into {}\n", index.doc_names().len(), out.display()))?;
        }
        Command::Search {
            index,
            corpus,
            request,
            top_k,
            explain,
            json,
        } => {
            let index = load_index(&index, &config)?;
            let records = load_corpus(&corpus).map_err(PipelineError::from)?;
            let requests = load_requests(&request)?;
            let mut selection = config.selection;
            if let Some(k) = top_k {
                selection.top_k = k;
            }
            let checker = checker_for(&config, client_for(&config, false)?);
            for request in &requests {
                let matches = run_search(&index, &records, request, &selection, &checker)?;
                if json {
                    let line = serde_json::to_string(&matches).map_err(|e| CliError::internal(e.to_string()))?;
                    print(&format!("{line}\n"))?;
                } else {
                    print(&render_matches(&request.request_id, &matches, explain))?;
                }
            }
        }
        Command::Synthesize {
            corpus,
            n,
            seed,
            out,
            offline,
        } => {
            if n == 0 {
                return Err(CliError::user("-n must be at least 1"));
            }
            let client = client_for(&config, offline)?;
            let synth = SynthesisConfig {
                n,
                seed,
                parallelism: config.parallelism,
                ..Default::default()
            };
            let report = run_synthesize(&corpus, &out, &synth, client.as_deref())?;
            for s in &report.shortfalls {
                log::warn!("{}: produced {} of {} ({})", s.origin_model, s.produced, s.wanted, s.reasons.join("; "));
            }
            print(&format!(
                "wrote {} requests to {} ({} records short)\n",
                report.requests.len(),
                out.display(),
                report.shortfalls.len()
            ))?;
        }
        Command::Evaluate {
            index,
            corpus,
            requests,
            out,
            judge,
            exclude_origins,
        } => {
            load_index(&index, &config)?;
            let client = client_for(&config, false)?;
            let heuristic = DeterministicJudge::default();
            let llm_judge;
            let judge: &dyn Judge = match judge {
                JudgeKind::Heuristic => &heuristic,
                JudgeKind::Llm => {
                    config.require_network("the llm judge")?;
                    let c = client
                        .as_deref()
                        .ok_or_else(|| CliError::user("the llm judge needs an [llm] section in the config"))?;
                    llm_judge = LlmJudge { client: c, retries: 2 };
                    &llm_judge
                }
            };
            let eval = EvalConfig {
                selection: config.selection,
                exclude_origins,
                parallelism: config.parallelism,
            };
            let checker = checker_for(&config, client.clone());
            let report = run_evaluate(&index, &corpus, &requests, &out, &eval, &checker, judge)?;
            print(&report.summary_table())?;
        }
        Command::Serve { index, corpus, addr } => {
            let index = index
                .or_else(|| config.index.clone())
                .ok_or_else(|| CliError::user("no index path: pass --index or set `index` in the config"))?;
            let corpus = corpus
                .or_else(|| config.corpus.clone())
                .ok_or_else(|| CliError::user("no corpus path: pass --corpus or set `corpus` in the config"))?;
            let client = client_for(&config, false)?;
            let state = serve::ServiceState::new(config.selection, checker_for(&config, client)).with_source(
                serve::IndexSource {
                    index,
                    corpus,
                    params: config.bm25,
                    tokenizer: config.tokenizer,
                },
            );
            let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::internal(e.to_string()))?;
            runtime.block_on(serve::serve(addr, state))?;
        }
        Command::FetchListing { names, out } => {
            config.require_network("fetch-listing")?;
            let mut client = HubClient::new(config.hub_endpoint.clone());
            client.max_concurrency = config.parallelism;
            let mut listings = Vec::new();
            for (name, result) in names.iter().zip(client.fetch_many(&names)) {
                match result {
                    Ok(l) => listings.push(l),
                    Err(e) => log::warn!("{name}: {e}"),
                }
            }
            if listings.is_empty() {
                return Err(CliError::user("no listings could be fetched"));
            }
            match out {
                Some(path) => {
                    store_listings(&listings, &path).map_err(|e| CliError::internal(e.to_string()))?;
                    print(&format!("wrote {} listings to {}\n", listings.len(), path.display()))?;
                }
                None => {
                    for l in &listings {
                        let line = serde_json::to_string(l).map_err(|e| CliError::internal(e.to_string()))?;
                        print(&format!("{line}\n"))?;
                    }
                }
            }
        }
    }
    Ok(())
}
