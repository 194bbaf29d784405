//! Builds search requests from model records by mutating one attribute at a
//! time, and checks requests for internal conflicts.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::llm::{map_bounded, parse_json_object, ChatClient, ChatMessage, LlmError};
use crate::metadata::{
    normalize_token, AttributeKey, AttributeValue, ModelRecord, MutationKind, MutationStrategy, RequestOrigin,
    SearchRequest,
};
use crate::vocab::{modality_of, mutation_lexicon, prompts, task_modalities, ValueSets, MODALITIES};

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("no alternative values for `{0}`")]
    NoAlternatives(AttributeKey),
    #[error("`{0}` has no closed value set")]
    NoValueSet(AttributeKey),
    #[error("record has no `{0}` value to mutate")]
    MissingValue(AttributeKey),
    #[error("mutation of `{key}` failed: {reason}")]
    MutationFailed { key: AttributeKey, reason: String },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesizedRequest {
    pub request: SearchRequest,
    pub mutated_keys: BTreeSet<AttributeKey>,
}

impl SynthesizedRequest {
    pub fn to_json(&self) -> Value {
        let mut v = self.request.to_json();
        v["mutated_keys"] = json!(self.mutated_keys);
        v
    }

    pub fn to_line(&self) -> String {
        self.to_json().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidityMethod {
    Llm,
    Rule,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityVerdict {
    pub valid: bool,
    pub rationale: String,
    pub method: ValidityMethod,
}

/// The fields a request keeps from its origin record: function, plus the
/// license when the record has one.
pub fn project_request(record: &ModelRecord, request_id: impl Into<String>) -> SearchRequest {
    let mut req = SearchRequest::new(request_id);
    for key in [AttributeKey::Function, AttributeKey::License] {
        let v = record.get(key);
        if !v.is_absent() {
            req = req.with(key, v.clone());
        }
    }
    req
}

fn synthesized(record: &ModelRecord, request_id: String, key: AttributeKey, value: AttributeValue, kind: MutationKind, seed: u64) -> SynthesizedRequest {
    let mut request = project_request(record, request_id).with(key, value);
    request.origin = RequestOrigin::Synthesized {
        origin_model: record.registry_name.clone(),
        strategies: vec![MutationStrategy {
            kind,
            target_key: key,
            seed,
        }],
    };
    SynthesizedRequest {
        request,
        mutated_keys: BTreeSet::from([key]),
    }
}

/// Closed-set tokens the record's value already covers.
fn original_tokens(key: AttributeKey, value: &AttributeValue) -> BTreeSet<String> {
    let items: Vec<String> = match value {
        AttributeValue::TextList(items) => items.clone(),
        AttributeValue::Absent => Vec::new(),
        other => vec![other.render()],
    };
    items
        .iter()
        .flat_map(|item| {
            let mut out = vec![normalize_token(item)];
            if matches!(key, AttributeKey::InputFormat | AttributeKey::OutputFormat) {
                if let Some(m) = modality_of(item) {
                    out.push(m.to_string());
                }
            }
            out
        })
        .collect()
}

/// Replaces the record's value for `key` with a seeded draw from the key's
/// value set, excluding the original.
pub fn mutate_closed_set(
    record: &ModelRecord,
    key: AttributeKey,
    seed: u64,
    sets: &ValueSets,
) -> Result<SynthesizedRequest, SynthesisError> {
    let set = sets.get(key).ok_or(SynthesisError::NoValueSet(key))?;
    let value = record.get(key);
    if value.is_absent() {
        return Err(SynthesisError::MissingValue(key));
    }
    let original = original_tokens(key, value);
    let alternatives: Vec<&String> = set.iter().filter(|v| !original.contains(&normalize_token(v))).collect();
    if alternatives.is_empty() {
        return Err(SynthesisError::NoAlternatives(key));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = alternatives[rng.gen_range(0..alternatives.len() as u32) as usize];
    Ok(synthesized(
        record,
        format!("{}::{}-{seed:016x}", record.registry_name, key),
        key,
        AttributeValue::token(pick),
        MutationKind::ClosedSetSubstitute,
        seed,
    ))
}

const STOPWORDS: &[&str] = &[
    "the", "and", "for", "with", "from", "into", "that", "this", "are", "was", "its", "can", "not", "use", "using",
    "used", "model", "models", "based", "which",
];

fn content_words(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices().chain(std::iter::once((text.len(), ' '))) {
        match (start, c.is_alphabetic()) {
            (None, true) => start = Some(i),
            (Some(s), false) => {
                let w = text[s..i].to_lowercase();
                if w.chars().count() >= 3 && !STOPWORDS.contains(&w.as_str()) {
                    out.push((s, i));
                }
                start = None;
            }
            _ => {}
        }
    }
    out
}

fn mask(text: &str, spans: &[(usize, usize)]) -> String {
    let mut out = String::new();
    let mut last = 0;
    for &(s, e) in spans {
        out.push_str(&text[last..s]);
        out.push_str("[MASK]");
        last = e;
    }
    out.push_str(&text[last..]);
    out
}

fn same_text(a: &str, b: &str) -> bool {
    let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    norm(a) == norm(b)
}

fn clean_infill(response: &str) -> String {
    let line = response.trim().lines().next().unwrap_or("").trim();
    line.trim_matches(|c| c == '"' || c == '\'' || c == '`').trim().to_string()
}

fn match_case(original: &str, replacement: &str) -> String {
    if original.chars().next().is_some_and(char::is_uppercase) {
        let mut c = replacement.chars();
        c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
    } else {
        replacement.to_string()
    }
}

/// Offline infill: swaps the sides of an `X-to-Y` phrase or replaces one
/// word found in the bundled lexicon, both chosen by `seed`.
pub fn fallback_infill(text: &str, seed: u64) -> Option<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut options: Vec<String> = Vec::new();
    let to_re = Regex::new(r"\b([A-Za-z]+)-to-([A-Za-z]+)\b").expect("static regex");
    for caps in to_re.captures_iter(text) {
        let (a, b) = (&caps[1], &caps[2]);
        if !a.eq_ignore_ascii_case(b) {
            let m = caps.get(0).expect("whole match");
            options.push(format!("{}{}-to-{}{}", &text[..m.start()], b, a, &text[m.end()..]));
        }
    }
    let lexicon = mutation_lexicon();
    for (s, e) in content_words(text) {
        let word = &text[s..e];
        if let Some(subs) = lexicon.get(&word.to_lowercase()) {
            if let Some(sub) = subs.choose(&mut rng) {
                options.push(format!("{}{}{}", &text[..s], match_case(word, sub), &text[e..]));
            }
        }
    }
    options.retain(|o| !same_text(o, text));
    options.dedup();
    if options.is_empty() {
        return None;
    }
    Some(options.swap_remove(rng.gen_range(0..options.len() as u32) as usize))
}

/// Rewrites a free-text attribute. With a client, 1-3 content words are
/// masked and the model fills them; an unchanged answer is retried once.
/// Without one, [`fallback_infill`] is used.
pub fn mutate_free_text(
    record: &ModelRecord,
    key: AttributeKey,
    client: Option<&dyn ChatClient>,
    seed: u64,
) -> Result<SynthesizedRequest, SynthesisError> {
    let original = match record.get(key) {
        AttributeValue::Text(t) if !t.trim().is_empty() => t.clone(),
        AttributeValue::Absent => return Err(SynthesisError::MissingValue(key)),
        _ => {
            return Err(SynthesisError::MutationFailed {
                key,
                reason: "value is not free text".into(),
            })
        }
    };
    let failed = |reason: &str| SynthesisError::MutationFailed {
        key,
        reason: reason.to_string(),
    };
    let mutated = match client {
        None => fallback_infill(&original, seed).ok_or_else(|| failed("no substitutable word"))?,
        Some(client) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let words = content_words(&original);
            if words.is_empty() {
                return Err(failed("no content words to mask"));
            }
            let count = (1 + rng.gen_range(0..3u32) as usize).min(words.len());
            let mut chosen: Vec<(usize, usize)> = words.choose_multiple(&mut rng, count).copied().collect();
            chosen.sort_unstable();
            let prompt = prompts::mutation_infill().render(&[
                ("key", key.as_str()),
                ("original", &original),
                ("masked", &mask(&original, &chosen)),
            ]);
            let messages = [ChatMessage::user(prompt)];
            let mut result = None;
            for _ in 0..2 {
                let answer = clean_infill(&client.complete(&messages)?);
                if !answer.is_empty() && !answer.contains("[MASK]") && !same_text(&answer, &original) {
                    result = Some(answer);
                    break;
                }
            }
            result.ok_or_else(|| failed("generator returned the original value"))?
        }
    };
    Ok(synthesized(
        record,
        format!("{}::{}-{seed:016x}", record.registry_name, key),
        key,
        AttributeValue::text(mutated),
        MutationKind::FreeTextInfill,
        seed,
    ))
}

/// A strategy without its seed; seeds are derived per attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub kind: MutationKind,
    pub key: AttributeKey,
}

impl StrategySpec {
    pub fn closed(key: AttributeKey) -> Self {
        StrategySpec {
            kind: MutationKind::ClosedSetSubstitute,
            key,
        }
    }

    pub fn free(key: AttributeKey) -> Self {
        StrategySpec {
            kind: MutationKind::FreeTextInfill,
            key,
        }
    }
}

pub fn default_strategies() -> Vec<StrategySpec> {
    use AttributeKey::*;
    vec![
        StrategySpec::free(Function),
        StrategySpec::closed(License),
        StrategySpec::closed(InputFormat),
        StrategySpec::closed(OutputFormat),
        StrategySpec::closed(Task),
        StrategySpec::closed(Language),
    ]
}

/// Seed for one attempt on one record, stable across platforms.
pub fn derive_seed(seed: u64, registry_name: &str, attempt: usize) -> u64 {
    let digest = Sha256::digest(format!("{seed}:{registry_name}:{attempt}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub origin_model: String,
    pub wanted: usize,
    pub produced: usize,
    /// Last error per strategy that failed.
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SynthesisReport {
    pub requests: Vec<SynthesizedRequest>,
    pub shortfalls: Vec<Shortfall>,
}

fn mutated_value(r: &SynthesizedRequest) -> (AttributeKey, String) {
    let key = *r.mutated_keys.iter().next().expect("one mutated key");
    (key, r.request.get(key).render().to_lowercase())
}

/// Up to `n` pairwise-distinct requests from one record, cycling through
/// `strategies`. Fewer than `n` comes back with a [`Shortfall`].
pub fn synthesize_requests(
    record: &ModelRecord,
    n: usize,
    strategies: &[StrategySpec],
    seed: u64,
    sets: &ValueSets,
    client: Option<&dyn ChatClient>,
) -> Result<(Vec<SynthesizedRequest>, Option<Shortfall>), SynthesisError> {
    let mut out: Vec<SynthesizedRequest> = Vec::new();
    let mut seen: BTreeSet<(AttributeKey, String)> = BTreeSet::new();
    let mut failures: Vec<(StrategySpec, String)> = Vec::new();
    let mut dead: BTreeSet<usize> = BTreeSet::new();
    let max_attempts = n.max(1) * strategies.len().max(1) * 4;
    let mut attempt = 0;
    while out.len() < n && attempt < max_attempts && dead.len() < strategies.len() {
        let si = attempt % strategies.len();
        let spec = strategies[si];
        let s = derive_seed(seed, &record.registry_name, attempt);
        attempt += 1;
        if dead.contains(&si) {
            continue;
        }
        let result = match spec.kind {
            MutationKind::ClosedSetSubstitute => mutate_closed_set(record, spec.key, s, sets),
            MutationKind::FreeTextInfill => mutate_free_text(record, spec.key, client, s),
        };
        match result {
            Ok(mut r) => {
                if seen.insert(mutated_value(&r)) {
                    r.request.request_id = format!("{}#{}", record.registry_name, out.len() + 1);
                    out.push(r);
                }
            }
            Err(e @ SynthesisError::Llm(_)) => return Err(e),
            Err(e) => {
                // Deterministic failures will not change with a new seed.
                if matches!(
                    e,
                    SynthesisError::NoAlternatives(_) | SynthesisError::NoValueSet(_) | SynthesisError::MissingValue(_)
                ) || client.is_none()
                {
                    dead.insert(si);
                }
                failures.retain(|(f, _)| *f != spec);
                failures.push((spec, e.to_string()));
            }
        }
    }
    let shortfall = (out.len() < n).then(|| {
        let sf = Shortfall {
            origin_model: record.registry_name.clone(),
            wanted: n,
            produced: out.len(),
            reasons: failures.into_iter().map(|(_, r)| r).collect(),
        };
        log::warn!("{}: produced {} of {} requests ({})", sf.origin_model, sf.produced, sf.wanted, sf.reasons.join("; "));
        sf
    });
    Ok((out, shortfall))
}

#[derive(Debug, Clone)]
pub struct SynthesisConfig {
    pub n: usize,
    pub seed: u64,
    pub strategies: Vec<StrategySpec>,
    pub value_sets: ValueSets,
    pub parallelism: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            n: 3,
            seed: 42,
            strategies: default_strategies(),
            value_sets: ValueSets::bundled().clone(),
            parallelism: 4,
        }
    }
}

/// Runs [`synthesize_requests`] over every record; output follows corpus order.
pub fn synthesize_corpus(
    records: &[ModelRecord],
    config: &SynthesisConfig,
    client: Option<&dyn ChatClient>,
) -> Result<SynthesisReport, SynthesisError> {
    let results = map_bounded(records, config.parallelism.max(1), |r| {
        synthesize_requests(r, config.n, &config.strategies, config.seed, &config.value_sets, client)
    });
    let mut report = SynthesisReport::default();
    for result in results {
        let (requests, shortfall) = result?;
        report.requests.extend(requests);
        report.shortfalls.extend(shortfall);
    }
    Ok(report)
}

pub fn write_requests(path: &Path, requests: &[SynthesizedRequest]) -> Result<(), SynthesisError> {
    let mut text = String::new();
    for r in requests {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|source| SynthesisError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn modality_token(value: &AttributeValue) -> Option<String> {
    let text = value.render().to_lowercase();
    if MODALITIES.contains(&text.trim()) {
        return Some(text.trim().to_string());
    }
    modality_of(&text).map(str::to_string)
}

/// Structural conflicts between a request's task and its formats.
pub fn rule_validate(request: &SearchRequest) -> ValidityVerdict {
    let task = request.get(AttributeKey::Task);
    if let Some(m) = (!task.is_absent()).then(|| task_modalities().get(&normalize_token(&task.render()))).flatten() {
        for (key, expected) in [(AttributeKey::InputFormat, &m.input), (AttributeKey::OutputFormat, &m.output)] {
            let v = request.get(key);
            if let Some(found) = (!v.is_absent()).then(|| modality_token(v)).flatten() {
                if &found != expected {
                    return ValidityVerdict {
                        valid: false,
                        rationale: format!(
                            "task {} expects {} {key}, but the request asks for {found}",
                            task.render(),
                            expected
                        ),
                        method: ValidityMethod::Rule,
                    };
                }
            }
        }
    }
    ValidityVerdict {
        valid: true,
        rationale: "no conflicting fields found".into(),
        method: ValidityMethod::Rule,
    }
}

/// Checks a request for internal conflicts. Downstream-use concerns such as
/// a restrictive license are out of scope. The model answer is used when it
/// parses; otherwise the rule table decides.
pub fn validate_request(request: &SearchRequest, client: Option<&dyn ChatClient>) -> Result<ValidityVerdict, SynthesisError> {
    let Some(client) = client else {
        return Ok(rule_validate(request));
    };
    let fields: serde_json::Map<String, Value> = request
        .present_keys()
        .map(|k| (k.as_str().to_string(), Value::String(request.get(k).render())))
        .collect();
    let prompt = prompts::request_validate().render(&[("request", &Value::Object(fields).to_string())]);
    let response = client.complete(&[ChatMessage::user(prompt)])?;
    let parsed = parse_json_object(&response).and_then(|o| {
        let valid = o.get("valid").and_then(Value::as_bool)?;
        let rationale = o.get("rationale").and_then(Value::as_str).unwrap_or("").trim().to_string();
        Some((valid, rationale))
    });
    Ok(match parsed {
        Some((valid, rationale)) => ValidityVerdict {
            valid,
            rationale: if rationale.is_empty() && !valid {
                "the generator reported a conflict".into()
            } else {
                rationale
            },
            method: ValidityMethod::Llm,
        },
        None => rule_validate(request),
    })
}
