//! File-level stages: ingest, extract, index, search, synthesize, evaluate.
//!
//! Ingest writes the corpus plus a sidecar `<corpus stem>.cards.jsonl`
//! holding the raw card text, which the extract stage reads back.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::card::{
    corpus_stats, load_corpus, load_listings, parse_card, parse_card_bytes, publicity_to_fields, read_card_dir,
    store_corpus, CardError, CorpusStats, HubListing,
};
use crate::config::ConfigError;
use crate::constraints::ConstraintChecker;
use crate::evaluation::{run_benchmark, EvalConfig, EvalError, EvalReport, Judge};
use crate::extraction::{extract_metadata, fallback_extract, ExtractionConfig};
use crate::llm::{map_bounded, ChatClient, LlmError};
use crate::metadata::{card_digest, consolidate_fields, AttributeMap, MetadataError, ModelRecord, SearchRequest, Source};
use crate::selection::{select, RankedMatch, SelectionConfig, SelectionError};
use crate::similarity::{build_index, trivial_keys, Bm25Index, Bm25Params, SimilarityError, TokenizerConfig};
use crate::synthesis::{synthesize_corpus, write_requests, SynthesisConfig, SynthesisError, SynthesisReport};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Card(#[from] CardError),
    #[error(transparent)]
    Metadata(#[from] MetadataError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {reason}")]
    Input { path: PathBuf, reason: String },
    #[error("index does not match corpus: {0}")]
    IndexMismatch(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// True for problems with the caller's inputs rather than the program.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, PipelineError::Llm(_) | PipelineError::Io { .. } | PipelineError::Eval(EvalError::Llm(_)))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `data/corpus.jsonl` -> `data/corpus.cards.jsonl`.
pub fn cards_sidecar(corpus: &Path) -> PathBuf {
    let stem = corpus.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    corpus.with_file_name(format!("{stem}.cards.jsonl"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CardLine {
    registry_name: String,
    raw: String,
}

#[derive(Debug, Clone)]
pub struct IngestOutput {
    pub records: Vec<ModelRecord>,
    /// Raw card text by registry name.
    pub cards: BTreeMap<String, String>,
    pub listings: Vec<HubListing>,
    pub stats: CorpusStats,
    /// One line per card that was skipped or parsed with a warning.
    pub warnings: Vec<String>,
}

/// Parses every `README.md` under `cards_dir` and attaches publicity fields.
pub fn ingest(cards_dir: &Path, listings: Option<&Path>) -> Result<IngestOutput, PipelineError> {
    let listings = match listings {
        Some(p) => load_listings(p)?,
        None => Vec::new(),
    };
    let by_name: BTreeMap<&str, &HubListing> = listings.iter().map(|l| (l.registry_name.as_str(), l)).collect();
    let mut records = Vec::new();
    let mut cards = BTreeMap::new();
    let mut warnings = Vec::new();
    for (name, bytes) in read_card_dir(cards_dir)? {
        let card = match parse_card_bytes(&bytes, &name) {
            Ok(c) => c,
            Err(e) => {
                warnings.push(format!("{name}: skipped ({e})"));
                continue;
            }
        };
        if card.raw.trim().is_empty() {
            warnings.push(format!("{name}: skipped (empty card)"));
            continue;
        }
        if let Some(w) = &card.warning {
            warnings.push(format!("{name}: {w}"));
        }
        let fields = publicity_to_fields(&card, by_name.get(name.as_str()).copied());
        let mut record = ModelRecord::new(name.clone(), card_digest(&card.raw));
        record.attributes = fields.attributes;
        cards.insert(name, card.raw);
        records.push(record);
    }
    if records.is_empty() {
        return Err(CardError::EmptyCorpus.into());
    }
    let stats = corpus_stats(&records, &listings)?;
    Ok(IngestOutput {
        records,
        cards,
        listings,
        stats,
        warnings,
    })
}

pub fn store_cards(cards: &BTreeMap<String, String>, path: &Path) -> Result<(), PipelineError> {
    let mut text = String::new();
    for (registry_name, raw) in cards {
        let line = CardLine {
            registry_name: registry_name.clone(),
            raw: raw.clone(),
        };
        text.push_str(&serde_json::to_string(&line).expect("card line serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn load_cards(path: &Path) -> Result<BTreeMap<String, String>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str::<CardLine>(l)
                .map(|c| (c.registry_name, c.raw))
                .map_err(|e| PipelineError::Input {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })
        })
        .collect()
}

/// Writes the corpus and its card sidecar.
pub fn write_ingest(output: &IngestOutput, out_corpus: &Path) -> Result<(), PipelineError> {
    store_corpus(&output.records, out_corpus)?;
    store_cards(&output.cards, &cards_sidecar(out_corpus))
}

/// Extracts literature attributes for each record from its card and merges
/// them with the record's publicity fields. Without a client, or when the
/// model's answers never parse, the heuristic extractor is used.
pub fn extract_corpus(
    records: &[ModelRecord],
    cards: &BTreeMap<String, String>,
    client: Option<&dyn ChatClient>,
    config: &ExtractionConfig,
    parallelism: usize,
) -> Result<Vec<ModelRecord>, PipelineError> {
    let results = map_bounded(records, parallelism.max(1), |record| -> Result<ModelRecord, PipelineError> {
        let raw = cards.get(&record.registry_name).ok_or_else(|| PipelineError::Input {
            path: PathBuf::from(&record.registry_name),
            reason: "no card text for this record".into(),
        })?;
        if card_digest(raw) != record.card_digest {
            return Err(PipelineError::Input {
                path: PathBuf::from(&record.registry_name),
                reason: "card text does not match the record's digest".into(),
            });
        }
        let card = parse_card(raw, &record.registry_name);
        let extracted = match client {
            Some(c) => {
                let r = extract_metadata(&card, c, config)?;
                if r.schema_valid {
                    r
                } else {
                    log::warn!("{}: unusable model output, using heuristics", record.registry_name);
                    fallback_extract(&card)
                }
            }
            None => fallback_extract(&card),
        };
        let publicity: AttributeMap = record
            .attributes
            .iter()
            .filter(|(_, a)| a.provenance.source != Source::CardExtracted)
            .map(|(k, a)| (*k, a.clone()))
            .collect();
        let mut out = record.clone();
        out.attributes = consolidate_fields(&extracted.attributes, &publicity);
        Ok(out)
    });
    results.into_iter().collect()
}

pub fn run_extract(
    corpus: &Path,
    out_corpus: &Path,
    client: Option<&dyn ChatClient>,
    config: &ExtractionConfig,
    parallelism: usize,
) -> Result<Vec<ModelRecord>, PipelineError> {
    let records = load_corpus(corpus)?;
    let cards = load_cards(&cards_sidecar(corpus))?;
    let out = extract_corpus(&records, &cards, client, config, parallelism)?;
    store_corpus(&out, out_corpus)?;
    let sidecar = cards_sidecar(out_corpus);
    if sidecar != cards_sidecar(corpus) {
        store_cards(&cards, &sidecar)?;
    }
    Ok(out)
}

pub fn run_index(
    corpus: &Path,
    out_index: &Path,
    params: Bm25Params,
    tokenizer: TokenizerConfig,
) -> Result<Bm25Index, PipelineError> {
    let records = load_corpus(corpus)?;
    let index = build_index(&records, &trivial_keys(), params, tokenizer)?;
    index.save(out_index)?;
    Ok(index)
}

/// Ensures the index was built over exactly these records.
pub fn check_index(index: &Bm25Index, records: &[ModelRecord]) -> Result<(), PipelineError> {
    let names: BTreeSet<&str> = records.iter().map(|r| r.registry_name.as_str()).collect();
    let indexed: BTreeSet<&str> = index.doc_names().iter().map(String::as_str).collect();
    if names != indexed {
        let missing = names.difference(&indexed).count();
        let extra = indexed.difference(&names).count();
        return Err(PipelineError::IndexMismatch(format!(
            "{missing} corpus records not indexed, {extra} indexed names not in corpus; rebuild the index"
        )));
    }
    Ok(())
}

/// Reads requests from a file holding one JSON object per line, or a
/// sequence of (possibly pretty-printed) JSON objects.
pub fn load_requests(path: &Path) -> Result<Vec<SearchRequest>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_requests(&text).map_err(|reason| PipelineError::Input {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn parse_requests(text: &str) -> Result<Vec<SearchRequest>, String> {
    let mut out = Vec::new();
    for (i, value) in serde_json::Deserializer::from_str(text).into_iter::<Value>().enumerate() {
        let value = value.map_err(|e| format!("request {}: {e}", i + 1))?;
        let request = SearchRequest::from_json(&value).map_err(|e| format!("request {}: {e}", i + 1))?;
        out.push(request);
    }
    if out.is_empty() {
        return Err("no requests found".into());
    }
    Ok(out)
}

pub fn run_search(
    index: &Bm25Index,
    corpus: &[ModelRecord],
    request: &SearchRequest,
    config: &SelectionConfig,
    checker: &dyn ConstraintChecker,
) -> Result<Vec<RankedMatch>, PipelineError> {
    request.validate()?;
    check_index(index, corpus)?;
    Ok(select(request, corpus, index, config, checker)?)
}

pub fn run_synthesize(
    corpus: &Path,
    out_requests: &Path,
    config: &SynthesisConfig,
    client: Option<&dyn ChatClient>,
) -> Result<SynthesisReport, PipelineError> {
    let records = load_corpus(corpus)?;
    let report = synthesize_corpus(&records, config, client)?;
    write_requests(out_requests, &report.requests)?;
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
pub fn run_evaluate(
    index: &Path,
    corpus: &Path,
    requests: &Path,
    out_report: &Path,
    config: &EvalConfig,
    checker: &dyn ConstraintChecker,
    judge: &dyn Judge,
) -> Result<EvalReport, PipelineError> {
    let index = Bm25Index::load(index)?;
    let records = load_corpus(corpus)?;
    check_index(&index, &records)?;
    let requests = load_requests(requests)?;
    let report = run_benchmark(&requests, &records, &index, config, checker, judge)?;
    report.write(out_report)?;
    Ok(report)
}
