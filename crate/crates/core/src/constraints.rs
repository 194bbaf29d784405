//! Compatibility checks for the nine special attributes.
//!
//! Licenses go through a rule table, sizes and costs through numeric
//! thresholds, and the remaining free-text keys through a per-key model
//! prompt, or a term-containment check when no model is configured.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::extraction::parse_quantity;
use crate::llm::{parse_json_object, ChatClient, ChatMessage, LlmError};
use crate::metadata::{units, AttributeKey, AttributeValue, ModelRecord, Quantity, SearchRequest};
use crate::similarity::tokenize;
use crate::vocab::{license_rows, special_prompt};

#[derive(Debug, Error)]
pub enum ConstraintError {
    #[error("`{0}` is not a special attribute")]
    NotSpecial(AttributeKey),
    #[error("cannot compare {required} with {candidate}")]
    UnitMismatch { required: String, candidate: String },
    #[error("license table: {0}")]
    Table(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LicenseClass {
    Permissive,
    WeakCopyleft,
    StrongCopyleft,
    NonCommercial,
    Restricted,
    Unknown,
}

impl FromStr for LicenseClass {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s.trim() {
            "permissive" => LicenseClass::Permissive,
            "weak_copyleft" => LicenseClass::WeakCopyleft,
            "strong_copyleft" => LicenseClass::StrongCopyleft,
            "non_commercial" => LicenseClass::NonCommercial,
            "restricted" => LicenseClass::Restricted,
            "unknown" => LicenseClass::Unknown,
            other => return Err(format!("unknown license class `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LicenseId {
    pub token: String,
    pub class: LicenseClass,
}

impl LicenseId {
    pub fn unknown() -> Self {
        LicenseId {
            token: "unknown".into(),
            class: LicenseClass::Unknown,
        }
    }

    pub fn is_unknown(&self) -> bool {
        self.class == LicenseClass::Unknown
    }
}

impl fmt::Display for LicenseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.token)
    }
}

/// The ten tokens every deployment ships with.
pub const BUNDLED_LICENSES: [&str; 10] = [
    "mit",
    "apache-2.0",
    "bsd-3-clause",
    "gpl-3.0",
    "lgpl-3.0",
    "cc-by-4.0",
    "cc-by-nc-4.0",
    "openrail",
    "proprietary",
    "unknown",
];

const NOISE_WORDS: &[&str] = &["license", "licence", "licensed", "the", "version", "v", "only", "or", "later"];

/// Case-, punctuation- and filler-insensitive form used for alias lookup.
fn alias_key(text: &str) -> String {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty() && !NOISE_WORDS.contains(w))
        .collect()
}

/// Token, class and aliases, loaded from a tab-separated table.
#[derive(Debug, Clone, PartialEq)]
pub struct LicenseTable {
    entries: Vec<LicenseId>,
    by_alias: HashMap<String, usize>,
}

impl LicenseTable {
    pub fn bundled() -> &'static LicenseTable {
        static TABLE: OnceLock<LicenseTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            LicenseTable::from_rows(license_rows()).expect("bundled license table is consistent")
        })
    }

    /// Parses `token<TAB>class<TAB>alias|alias...` lines; `#` starts a comment.
    pub fn from_tsv(text: &str) -> Result<LicenseTable, ConstraintError> {
        LicenseTable::from_rows(
            text.lines()
                .map(str::trim_end)
                .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
                .map(|l| l.split('\t').collect()),
        )
    }

    fn from_rows<'a>(rows: impl Iterator<Item = Vec<&'a str>>) -> Result<LicenseTable, ConstraintError> {
        let mut table = LicenseTable {
            entries: Vec::new(),
            by_alias: HashMap::new(),
        };
        for cols in rows {
            if cols.len() < 2 {
                return Err(ConstraintError::Table(format!("short row {cols:?}")));
            }
            let class: LicenseClass = cols[1].parse().map_err(ConstraintError::Table)?;
            let token = cols[0].trim().to_string();
            let idx = table.entries.len();
            table.entries.push(LicenseId {
                token: token.clone(),
                class,
            });
            let aliases = cols.get(2).map_or(Vec::new(), |a| a.split('|').collect());
            for alias in std::iter::once(token.as_str()).chain(aliases) {
                let key = alias_key(alias);
                if key.is_empty() {
                    continue;
                }
                if let Some(&prev) = table.by_alias.get(&key) {
                    if prev != idx {
                        return Err(ConstraintError::Table(format!(
                            "alias `{alias}` maps to both {} and {token}",
                            table.entries[prev].token
                        )));
                    }
                }
                table.by_alias.insert(key, idx);
            }
        }
        Ok(table)
    }

    pub fn entries(&self) -> &[LicenseId] {
        &self.entries
    }

    pub fn normalize(&self, text: &str) -> LicenseId {
        self.by_alias
            .get(&alias_key(text))
            .map(|&i| self.entries[i].clone())
            .unwrap_or_else(LicenseId::unknown)
    }
}

/// Looks a license string up in the bundled alias table.
pub fn normalize_license(text: &str) -> LicenseId {
    LicenseTable::bundled().normalize(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Satisfied,
    Violated,
    Unknown,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Satisfied => "satisfied",
            Outcome::Violated => "violated",
            Outcome::Unknown => "unknown",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Rule,
    Llm,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintVerdict {
    pub key: AttributeKey,
    pub outcome: Outcome,
    pub rationale: String,
    pub method: Method,
}

impl ConstraintVerdict {
    pub fn new(key: AttributeKey, outcome: Outcome, method: Method, rationale: impl Into<String>) -> Self {
        let mut rationale = rationale.into();
        if rationale.trim().is_empty() {
            rationale = format!("{key} requirement {outcome}");
        }
        ConstraintVerdict {
            key,
            outcome,
            rationale,
            method,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownHandling {
    #[default]
    TreatAsSatisfied,
    TreatAsViolated,
    /// Keep candidates with unknown verdicts, ranked after the fully
    /// satisfied ones.
    KeepUnknownAndRank,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstraintPolicy {
    pub unknown_handling: UnknownHandling,
    /// Relative slack for numeric comparisons.
    pub numeric_tolerance: f64,
}

impl Default for ConstraintPolicy {
    fn default() -> Self {
        ConstraintPolicy {
            unknown_handling: UnknownHandling::default(),
            numeric_tolerance: 0.0,
        }
    }
}

impl ConstraintPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.numeric_tolerance.is_finite() && self.numeric_tolerance >= 0.0 {
            Ok(())
        } else {
            Err(format!("numeric tolerance {} must be >= 0", self.numeric_tolerance))
        }
    }
}

pub fn license_compatible(required: &LicenseId, candidate: &LicenseId) -> ConstraintVerdict {
    use LicenseClass::*;
    let key = AttributeKey::License;
    let verdict = |outcome, why: String| ConstraintVerdict::new(key, outcome, Method::Rule, why);
    if candidate.is_unknown() {
        return verdict(Outcome::Unknown, "candidate license is unknown".into());
    }
    if required.token == candidate.token {
        return verdict(Outcome::Satisfied, format!("candidate uses the required license {}", candidate.token));
    }
    if candidate.class == Permissive {
        return verdict(Outcome::Satisfied, format!("{} is permissive", candidate.token));
    }
    if required.is_unknown() {
        return verdict(Outcome::Unknown, format!("required license `{}` is not in the table", required.token));
    }
    if candidate.class == NonCommercial {
        return if required.class == NonCommercial {
            verdict(Outcome::Satisfied, format!("{} is non-commercial like {}", candidate.token, required.token))
        } else {
            verdict(Outcome::Violated, format!("{} forbids commercial use, which {} allows", candidate.token, required.token))
        };
    }
    if required.class == StrongCopyleft && matches!(candidate.class, WeakCopyleft | StrongCopyleft) {
        return verdict(Outcome::Satisfied, format!("{} can be combined into a {} project", candidate.token, required.token));
    }
    let why = match candidate.class {
        StrongCopyleft => format!("{} is strong copyleft and conflicts with {}", candidate.token, required.token),
        WeakCopyleft => format!("{} is weak copyleft and conflicts with {}", candidate.token, required.token),
        _ => format!("{} restricts use beyond what {} allows", candidate.token, required.token),
    };
    verdict(Outcome::Violated, why)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// The candidate must not exceed the requirement.
    Max,
    /// The candidate must reach the requirement.
    Min,
}

/// Canonical unit and scale factor for unit spellings that may appear in
/// stored quantities.
fn canonical_unit(unit: &str) -> Option<(&'static str, f64)> {
    Some(match unit.trim().to_lowercase().as_str() {
        "bytes" | "byte" | "b" => (units::BYTES, 1.0),
        "kb" => (units::BYTES, 1e3),
        "mb" => (units::BYTES, 1e6),
        "gb" => (units::BYTES, 1e9),
        "tb" => (units::BYTES, 1e12),
        "kib" => (units::BYTES, 1024.0),
        "mib" => (units::BYTES, 1024f64.powi(2)),
        "gib" => (units::BYTES, 1024f64.powi(3)),
        "tib" => (units::BYTES, 1024f64.powi(4)),
        "params" | "parameters" => (units::PARAMS, 1.0),
        "usd" | "$" | "dollars" => (units::USD, 1.0),
        "gpu_hours" | "gpu-hours" | "gpu hours" => (units::GPU_HOURS, 1.0),
        "kg_co2" | "kg" => (units::KG_CO2, 1.0),
        "count" => (units::COUNT, 1.0),
        _ => return None,
    })
}

fn to_canonical(q: &Quantity) -> Option<(&'static str, f64)> {
    canonical_unit(&q.unit).map(|(u, f)| (u, q.amount * f))
}

fn render_quantity(q: &Quantity) -> String {
    format!("{} {}", q.amount, q.unit)
}

pub fn numeric_within(
    key: AttributeKey,
    required: &Quantity,
    candidate: Option<&Quantity>,
    direction: Direction,
    eps: f64,
) -> Result<ConstraintVerdict, ConstraintError> {
    let Some(candidate) = candidate else {
        return Ok(ConstraintVerdict::new(key, Outcome::Unknown, Method::Rule, format!("candidate has no {key}")));
    };
    let mismatch = || ConstraintError::UnitMismatch {
        required: render_quantity(required),
        candidate: render_quantity(candidate),
    };
    let (ru, r) = to_canonical(required).ok_or_else(mismatch)?;
    let (cu, c) = to_canonical(candidate).ok_or_else(mismatch)?;
    if ru != cu {
        return Err(mismatch());
    }
    let (ok, relation) = match direction {
        Direction::Max => (c <= r * (1.0 + eps), "at most"),
        Direction::Min => (c >= r * (1.0 - eps), "at least"),
    };
    let why = format!("{key} {c} {ru} is {}{relation} required {r} {ru}", if ok { "" } else { "not " });
    Ok(ConstraintVerdict::new(
        key,
        if ok { Outcome::Satisfied } else { Outcome::Violated },
        Method::Rule,
        why,
    ))
}

const MAX_PREFIXES: &[&str] = &["<=", "≤", "<", "at most", "up to", "no more than", "less than", "under", "below", "max", "maximum"];
const MIN_PREFIXES: &[&str] = &[">=", "≥", ">", "at least", "no less than", "more than", "over", "above", "min", "minimum"];

/// Reads a numeric requirement such as `"<= 2 GB"` or `"at least 16 GB"`.
/// Bare quantities are upper bounds.
pub fn parse_requirement(key: AttributeKey, value: &AttributeValue) -> Option<(Quantity, Direction)> {
    match value {
        AttributeValue::Quantity(q) => Some((q.clone(), Direction::Max)),
        AttributeValue::Text(t) | AttributeValue::Token(t) => {
            let lower = t.trim().to_lowercase();
            let mut direction = Direction::Max;
            let mut rest = lower.as_str();
            let longest = |prefixes: &[&'static str]| {
                prefixes
                    .iter()
                    .filter(|p| rest.starts_with(*p))
                    .max_by_key(|p| p.len())
                    .copied()
            };
            if let Some(p) = longest(MIN_PREFIXES) {
                direction = Direction::Min;
                rest = &rest[p.len()..];
            } else if let Some(p) = longest(MAX_PREFIXES) {
                rest = &rest[p.len()..];
            }
            let rest = rest.trim_start_matches([':', ' ']);
            parse_quantity(key, rest).map(|q| (q, direction))
        }
        _ => None,
    }
}

fn candidate_quantity(key: AttributeKey, value: &AttributeValue) -> Option<Quantity> {
    match value {
        AttributeValue::Quantity(q) => Some(q.clone()),
        AttributeValue::Text(t) => parse_quantity(key, t),
        _ => None,
    }
}

fn is_numeric_key(key: AttributeKey) -> bool {
    matches!(
        key,
        AttributeKey::ModelSize | AttributeKey::TrainingCost | AttributeKey::InferenceCost | AttributeKey::Hardware
    )
}

fn parse_verdict(response: &str) -> Option<(Outcome, String)> {
    let outcome_of = |s: &str| match s.trim().trim_matches(|c: char| !c.is_alphabetic()).to_lowercase().as_str() {
        "satisfied" => Some(Outcome::Satisfied),
        "violated" => Some(Outcome::Violated),
        "unknown" => Some(Outcome::Unknown),
        _ => None,
    };
    if let Some(obj) = parse_json_object(response) {
        let outcome = obj.get("verdict").and_then(Value::as_str).and_then(outcome_of)?;
        let rationale = obj.get("rationale").and_then(Value::as_str).unwrap_or("").trim().to_string();
        return Some((outcome, rationale));
    }
    let trimmed = response.trim();
    let (head, tail) = trimmed.split_once(char::is_whitespace).unwrap_or((trimmed, ""));
    outcome_of(head).map(|o| (o, tail.trim().to_string()))
}

/// Asks the model for a verdict with the key's prompt. Unparseable answers
/// are retried `retries` times, then reported as unknown.
pub fn check_special_llm(
    key: AttributeKey,
    required: &AttributeValue,
    candidate: &AttributeValue,
    client: &dyn ChatClient,
    retries: u32,
) -> Result<ConstraintVerdict, ConstraintError> {
    let template = special_prompt(key).ok_or(ConstraintError::NotSpecial(key))?;
    if candidate.is_absent() {
        return Ok(ConstraintVerdict::new(key, Outcome::Unknown, Method::Rule, format!("candidate has no {key}")));
    }
    let prompt = template.render(&[("required", &required.render()), ("candidate", &candidate.render())]);
    let messages = [ChatMessage::user(prompt)];
    for attempt in 0..=retries {
        let response = client.complete(&messages)?;
        if let Some((outcome, rationale)) = parse_verdict(&response) {
            return Ok(ConstraintVerdict::new(key, outcome, Method::Llm, rationale));
        }
        log::debug!("unparseable {key} verdict on attempt {}: {response:?}", attempt + 1);
    }
    Ok(ConstraintVerdict::new(
        key,
        Outcome::Unknown,
        Method::Llm,
        format!("no parseable verdict after {} attempts", retries + 1),
    ))
}

/// Satisfied when every content term of the requirement appears in the
/// candidate value; unknown otherwise. Never reports a violation.
pub fn containment_fallback(key: AttributeKey, required: &AttributeValue, candidate: &AttributeValue) -> ConstraintVerdict {
    if candidate.is_absent() {
        return ConstraintVerdict::new(key, Outcome::Unknown, Method::Fallback, format!("candidate has no {key}"));
    }
    let req: BTreeSet<String> = tokenize(&required.render()).into_iter().collect();
    let cand: BTreeSet<String> = tokenize(&candidate.render()).into_iter().collect();
    if !req.is_empty() && req.is_subset(&cand) {
        ConstraintVerdict::new(key, Outcome::Satisfied, Method::Fallback, "all required terms appear in the candidate")
    } else {
        let missing: Vec<&str> = req.difference(&cand).map(String::as_str).collect();
        ConstraintVerdict::new(
            key,
            Outcome::Unknown,
            Method::Fallback,
            format!("cannot decide by term overlap; missing: {}", missing.join(", ")),
        )
    }
}

/// Dispatches one special attribute to the license rule, the numeric rule,
/// or the judgment path.
pub fn check_special(
    key: AttributeKey,
    required: &AttributeValue,
    candidate: &AttributeValue,
    client: Option<&dyn ChatClient>,
    policy: &ConstraintPolicy,
) -> Result<ConstraintVerdict, ConstraintError> {
    check_special_with(key, required, candidate, client, policy, LicenseTable::bundled(), 2)
}

fn check_special_with(
    key: AttributeKey,
    required: &AttributeValue,
    candidate: &AttributeValue,
    client: Option<&dyn ChatClient>,
    policy: &ConstraintPolicy,
    licenses: &LicenseTable,
    retries: u32,
) -> Result<ConstraintVerdict, ConstraintError> {
    if !key.is_special() {
        return Err(ConstraintError::NotSpecial(key));
    }
    if key == AttributeKey::License {
        if candidate.is_absent() {
            return Ok(ConstraintVerdict::new(key, Outcome::Unknown, Method::Rule, "candidate has no license"));
        }
        let req = licenses.normalize(&required.render());
        let cand = licenses.normalize(&candidate.render());
        if req.is_unknown() && cand.is_unknown() {
            if let Some(client) = client {
                return check_special_llm(key, required, candidate, client, retries);
            }
        }
        return Ok(license_compatible(&req, &cand));
    }
    if is_numeric_key(key) {
        if let Some((req, direction)) = parse_requirement(key, required) {
            if candidate.is_absent() {
                return numeric_within(key, &req, None, direction, policy.numeric_tolerance);
            }
            if let Some(cand) = candidate_quantity(key, candidate) {
                match numeric_within(key, &req, Some(&cand), direction, policy.numeric_tolerance) {
                    Err(ConstraintError::UnitMismatch { .. }) => {
                        log::debug!("{key}: incomparable units, using the judgment path");
                    }
                    other => return other,
                }
            }
        }
    }
    match client {
        Some(client) => check_special_llm(key, required, candidate, client, retries),
        None => Ok(containment_fallback(key, required, candidate)),
    }
}

/// Produces verdicts for every special attribute a request sets.
pub trait ConstraintChecker: Send + Sync {
    fn check(
        &self,
        key: AttributeKey,
        required: &AttributeValue,
        candidate: &AttributeValue,
    ) -> Result<ConstraintVerdict, ConstraintError>;

    /// One verdict per special key present in the request, in key order.
    fn check_all(&self, request: &SearchRequest, candidate: &ModelRecord) -> Result<Vec<ConstraintVerdict>, ConstraintError> {
        request
            .present_keys()
            .filter(|k| k.is_special())
            .map(|k| self.check(k, request.get(k), candidate.get(k)))
            .collect()
    }
}

/// The standard checker: rule paths plus an optional model for judgments.
#[derive(Clone)]
pub struct SpecialChecker {
    pub policy: ConstraintPolicy,
    pub client: Option<Arc<dyn ChatClient>>,
    pub licenses: LicenseTable,
    pub retries: u32,
}

impl fmt::Debug for SpecialChecker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpecialChecker")
            .field("policy", &self.policy)
            .field("client", &self.client.is_some())
            .field("retries", &self.retries)
            .finish()
    }
}

impl Default for SpecialChecker {
    fn default() -> Self {
        SpecialChecker::deterministic(ConstraintPolicy::default())
    }
}

impl SpecialChecker {
    pub fn deterministic(policy: ConstraintPolicy) -> Self {
        SpecialChecker {
            policy,
            client: None,
            licenses: LicenseTable::bundled().clone(),
            retries: 2,
        }
    }

    pub fn with_client(mut self, client: Arc<dyn ChatClient>) -> Self {
        self.client = Some(client);
        self
    }

    pub fn with_licenses(mut self, licenses: LicenseTable) -> Self {
        self.licenses = licenses;
        self
    }
}

impl ConstraintChecker for SpecialChecker {
    fn check(
        &self,
        key: AttributeKey,
        required: &AttributeValue,
        candidate: &AttributeValue,
    ) -> Result<ConstraintVerdict, ConstraintError> {
        check_special_with(key, required, candidate, self.client.as_deref(), &self.policy, &self.licenses, self.retries)
    }
}

/// Renders the verdict matrix over `tokens`: one row per requirement, one
/// `S`/`V`/`U` column per candidate.
pub fn license_matrix(tokens: &[&str]) -> String {
    let width = tokens.iter().map(|t| t.len()).max().unwrap_or(0);
    let mut out = format!("{:width$} | {}\n", "required\\candidate", tokens.join(" "), width = width.max(18));
    for req in tokens {
        let r = normalize_license(req);
        let cells: Vec<String> = tokens
            .iter()
            .map(|cand| {
                let v = license_compatible(&r, &normalize_license(cand));
                let mark = match v.outcome {
                    Outcome::Satisfied => "S",
                    Outcome::Violated => "V",
                    Outcome::Unknown => "U",
                };
                format!("{mark:<w$}", w = cand.len())
            })
            .collect();
        out.push_str(&format!("{:width$} | {}\n", req, cells.join(" ").trim_end(), width = width.max(18)));
    }
    out
}
