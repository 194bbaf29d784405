//! Batch evaluation: runs requests through selection, labels each returned
//! candidate, and counts requests with a fully satisfying candidate within
//! the first 1, 3, 5 and 10 results.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::constraints::{ConstraintChecker, Outcome};
use crate::llm::{map_bounded, parse_json_object, ChatClient, ChatMessage, LlmError};
use crate::metadata::{ModelRecord, RequestOrigin, SearchRequest};
use crate::selection::{select_excluding, RankedMatch, SelectionConfig, SelectionError};
use crate::similarity::Similarity;
use crate::vocab::prompts;

pub const CUTOFFS: [usize; 4] = [1, 3, 5, 10];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no requests to evaluate")]
    EmptyRequests,
    #[error("request {request_id}: {source}")]
    Selection {
        request_id: String,
        #[source]
        source: SelectionError,
    },
    #[error("judge gave no usable label: {0}")]
    JudgeFailed(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SatisfactionLabel {
    Full,
    Partial,
    None,
}

/// Labels one returned candidate against the request.
pub trait Judge: Send + Sync {
    fn name(&self) -> String;
    fn judge(&self, request: &SearchRequest, candidate: &ModelRecord, matched: &RankedMatch) -> Result<SatisfactionLabel, EvalError>;
}

/// Proxy for a human rater. A trivial field counts as met when its
/// normalized similarity reaches `threshold`; a special field when its
/// verdict is satisfied. Full means every requested field is met. Partial
/// means some trivial field overlaps the candidate at all.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeterministicJudge {
    pub threshold: f64,
}

impl Default for DeterministicJudge {
    fn default() -> Self {
        DeterministicJudge { threshold: 0.8 }
    }
}

impl Judge for DeterministicJudge {
    fn name(&self) -> String {
        format!("deterministic proxy (field similarity >= {})", self.threshold)
    }

    fn judge(&self, request: &SearchRequest, _candidate: &ModelRecord, m: &RankedMatch) -> Result<SatisfactionLabel, EvalError> {
        let trivial_met = m.field_scores.iter().all(|f| f.normalized >= self.threshold);
        let special_met = request
            .present_keys()
            .filter(|k| k.is_special())
            .all(|k| m.verdicts.iter().any(|v| v.key == k && v.outcome == Outcome::Satisfied));
        if trivial_met && special_met && !m.field_scores.is_empty() {
            Ok(SatisfactionLabel::Full)
        } else if m.field_scores.iter().any(|f| f.normalized > 0.0) {
            Ok(SatisfactionLabel::Partial)
        } else {
            Ok(SatisfactionLabel::None)
        }
    }
}

/// Asks a chat model for the label.
pub struct LlmJudge<'a> {
    pub client: &'a dyn ChatClient,
    pub retries: u32,
}

fn fields_json<'a>(pairs: impl Iterator<Item = (&'a str, String)>) -> String {
    let map: serde_json::Map<String, Value> = pairs.map(|(k, v)| (k.to_string(), Value::String(v))).collect();
    serde_json::to_string_pretty(&Value::Object(map)).unwrap_or_default()
}

impl Judge for LlmJudge<'_> {
    fn name(&self) -> String {
        "llm judge".into()
    }

    fn judge(&self, request: &SearchRequest, candidate: &ModelRecord, _m: &RankedMatch) -> Result<SatisfactionLabel, EvalError> {
        let req = fields_json(request.present_keys().map(|k| (k.as_str(), request.get(k).render())));
        let cand = fields_json(
            candidate
                .present_keys()
                .filter(|k| k.is_literature() || *k == crate::metadata::AttributeKey::License)
                .map(|k| (k.as_str(), candidate.get(k).render())),
        );
        let prompt = prompts::judge().render(&[("request", &req), ("candidate", &cand)]);
        let messages = [ChatMessage::user(prompt)];
        let mut last = String::new();
        for _ in 0..=self.retries {
            last = self.client.complete(&messages)?;
            let label = parse_json_object(&last)
                .and_then(|o| o.get("label").and_then(Value::as_str).map(str::to_lowercase));
            match label.as_deref() {
                Some("full") => return Ok(SatisfactionLabel::Full),
                Some("partial") => return Ok(SatisfactionLabel::Partial),
                Some("none") => return Ok(SatisfactionLabel::None),
                _ => {}
            }
        }
        Err(EvalError::JudgeFailed(last))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub selection: SelectionConfig,
    /// Drop each synthesized request's origin model from its candidates.
    pub exclude_origins: bool,
    pub parallelism: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            selection: SelectionConfig::default(),
            exclude_origins: false,
            parallelism: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub rank: usize,
    pub registry_name: String,
    pub similarity: f64,
    pub label: SatisfactionLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRow {
    pub request_id: String,
    pub origin_model: Option<String>,
    pub candidates: Vec<CandidateRow>,
}

impl RequestRow {
    pub fn first_full_rank(&self) -> Option<usize> {
        self.candidates
            .iter()
            .find(|c| c.label == SatisfactionLabel::Full)
            .map(|c| c.rank)
    }

    pub fn has_partial(&self) -> bool {
        self.candidates.iter().any(|c| c.label == SatisfactionLabel::Partial)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Aggregate {
    pub requests: usize,
    /// `(cutoff, requests with a full label at rank <= cutoff)`.
    pub full_hits: Vec<(usize, usize)>,
    /// Requests with a full label anywhere in the returned list.
    pub full: usize,
    pub partial_only: usize,
    pub miss: usize,
}

impl Aggregate {
    pub fn from_rows(rows: &[RequestRow]) -> Self {
        let firsts: Vec<Option<usize>> = rows.iter().map(RequestRow::first_full_rank).collect();
        let full = firsts.iter().filter(|f| f.is_some()).count();
        let partial_only = rows
            .iter()
            .zip(&firsts)
            .filter(|(r, f)| f.is_none() && r.has_partial())
            .count();
        Aggregate {
            requests: rows.len(),
            full_hits: CUTOFFS
                .iter()
                .map(|&k| (k, firsts.iter().filter(|f| f.is_some_and(|r| r <= k)).count()))
                .collect(),
            full,
            partial_only,
            miss: rows.len() - full - partial_only,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub judge: String,
    pub config: EvalConfig,
    pub aggregate: Aggregate,
    pub rows: Vec<RequestRow>,
}

impl EvalReport {
    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, self.to_json_string()).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Cumulative full-hit buckets, then partial-only and miss counts.
    pub fn summary_table(&self) -> String {
        let a = &self.aggregate;
        let pct = |n: usize| if a.requests == 0 { 0.0 } else { 100.0 * n as f64 / a.requests as f64 };
        let mut out = format!("judge: {}\n", self.judge);
        let _ = writeln!(out, "{:<14} {:>8} {:>8}", "bucket", "requests", "share");
        for (k, n) in &a.full_hits {
            let _ = writeln!(out, "{:<14} {:>8} {:>7.1}%", format!("full@top-{k}"), n, pct(*n));
        }
        let _ = writeln!(out, "{:<14} {:>8} {:>7.1}%", "partial only", a.partial_only, pct(a.partial_only));
        let _ = writeln!(out, "{:<14} {:>8} {:>7.1}%", "miss", a.miss, pct(a.miss));
        let _ = writeln!(out, "{:<14} {:>8}", "total", a.requests);
        out
    }
}

pub fn run_benchmark(
    requests: &[SearchRequest],
    corpus: &[ModelRecord],
    index: &dyn Similarity,
    config: &EvalConfig,
    checker: &dyn ConstraintChecker,
    judge: &dyn Judge,
) -> Result<EvalReport, EvalError> {
    if requests.is_empty() {
        return Err(EvalError::EmptyRequests);
    }
    let by_name: std::collections::HashMap<&str, &ModelRecord> =
        corpus.iter().map(|r| (r.registry_name.as_str(), r)).collect();
    let rows = map_bounded(requests, config.parallelism.max(1), |req| -> Result<RequestRow, EvalError> {
        let origin_model = match &req.origin {
            RequestOrigin::Synthesized { origin_model, .. } => Some(origin_model.clone()),
            RequestOrigin::Developer => None,
        };
        let exclude: BTreeSet<String> = origin_model
            .iter()
            .filter(|_| config.exclude_origins)
            .cloned()
            .collect();
        let matches = select_excluding(req, corpus, index, &config.selection, checker, &exclude).map_err(|source| {
            EvalError::Selection {
                request_id: req.request_id.clone(),
                source,
            }
        })?;
        let candidates = matches
            .iter()
            .map(|m| {
                let record = by_name[m.registry_name.as_str()];
                Ok(CandidateRow {
                    rank: m.rank,
                    registry_name: m.registry_name.clone(),
                    similarity: m.similarity,
                    label: judge.judge(req, record, m)?,
                })
            })
            .collect::<Result<Vec<_>, EvalError>>()?;
        Ok(RequestRow {
            request_id: req.request_id.clone(),
            origin_model,
            candidates,
        })
    });
    let mut rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    rows.sort_by(|a, b| a.request_id.cmp(&b.request_id));
    Ok(EvalReport {
        judge: judge.name(),
        config: *config,
        aggregate: Aggregate::from_rows(&rows),
        rows,
    })
}
