//! The fixed attribute template shared by candidate models and search requests.
//!
//! A [`ModelRecord`] is a template instance populated from a model card and
//! hub tags; a [`SearchRequest`] is an instance populated by a developer (or by
//! the request synthesizer). Both use the same [`AttributeKey`] domain, which
//! is what makes field-wise comparison possible.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetadataError {
    #[error("unknown attribute key `{0}`")]
    UnknownKey(String),
    #[error("malformed attribute `{key}`: {reason}")]
    MalformedAttribute { key: String, reason: String },
    #[error("malformed object: {0}")]
    Malformed(String),
    #[error("request has no trivial attribute to rank on")]
    NoTrivialFields,
}

macro_rules! attribute_keys {
    ($($variant:ident => $name:literal),+ $(,)?) => {
        /// One slot of the 33-attribute template.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum AttributeKey {
            $($variant),+
        }

        impl AttributeKey {
            pub const ALL: [AttributeKey; 33] = [$(AttributeKey::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $(AttributeKey::$variant => $name),+
                }
            }
        }

        impl FromStr for AttributeKey {
            type Err = MetadataError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($name => Ok(AttributeKey::$variant),)+
                    "library" | "library_name" => Ok(AttributeKey::Framework),
                    other => Err(MetadataError::UnknownKey(other.to_string())),
                }
            }
        }
    };
}

// Order: the 26 literature fields first, then the publicity-only fields.
attribute_keys! {
    Framework => "framework",
    Copyright => "copyright",
    Evaluation => "evaluation",
    Hardware => "hardware",
    CarbonEmitted => "carbon_emitted",
    Language => "language",
    Software => "software",
    Biases => "biases",
    Limitation => "limitation",
    HyperParameters => "hyper_parameters",
    FineTuning => "fine_tuning",
    BaseModel => "base_model",
    InputFormat => "input_format",
    Grant => "grant",
    Demo => "demo",
    Report => "report",
    Dataset => "dataset",
    Domain => "domain",
    InferenceCost => "inference_cost",
    OutputFormat => "output_format",
    GithubRepo => "github_repo",
    TrainingCost => "training_cost",
    ModelSize => "model_size",
    ParameterSize => "parameter_size",
    Function => "function",
    Others => "others",
    ModelName => "model_name",
    Likes => "likes",
    Downloads => "downloads",
    License => "license",
    Contributors => "contributors",
    Commits => "commits",
    Task => "task",
}

/// Attributes that need rule- or judgment-based compatibility checks instead
/// of text similarity.
pub const SPECIAL_KEYS: [AttributeKey; 9] = [
    AttributeKey::License,
    AttributeKey::Copyright,
    AttributeKey::Hardware,
    AttributeKey::Software,
    AttributeKey::TrainingCost,
    AttributeKey::InferenceCost,
    AttributeKey::Limitation,
    AttributeKey::Biases,
    AttributeKey::ModelSize,
];

/// Fields scraped directly from the hosting platform. `dataset` and
/// `framework` (the hub's `library`) are also literature fields.
pub const PUBLICITY_KEYS: [AttributeKey; 9] = [
    AttributeKey::ModelName,
    AttributeKey::Dataset,
    AttributeKey::Likes,
    AttributeKey::Downloads,
    AttributeKey::Framework,
    AttributeKey::License,
    AttributeKey::Contributors,
    AttributeKey::Commits,
    AttributeKey::Task,
];

impl AttributeKey {
    pub fn is_special(self) -> bool {
        SPECIAL_KEYS.contains(&self)
    }

    pub fn is_trivial(self) -> bool {
        !self.is_special()
    }

    /// One of the 26 fields extracted from card prose.
    pub fn is_literature(self) -> bool {
        (self as usize) < 26
    }

    pub fn is_publicity(self) -> bool {
        PUBLICITY_KEYS.contains(&self)
    }

    pub fn literature_keys() -> impl Iterator<Item = AttributeKey> {
        Self::ALL.into_iter().filter(|k| k.is_literature())
    }

    /// Unit used when a bare number is supplied for this key.
    pub fn default_unit(self) -> Option<&'static str> {
        use AttributeKey::*;
        match self {
            Likes | Downloads | Contributors | Commits => Some(units::COUNT),
            ModelSize | Hardware => Some(units::BYTES),
            ParameterSize => Some(units::PARAMS),
            TrainingCost | InferenceCost => Some(units::USD),
            CarbonEmitted => Some(units::KG_CO2),
            _ => None,
        }
    }
}

impl fmt::Display for AttributeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for AttributeKey {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for AttributeKey {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub mod units {
    pub const COUNT: &str = "count";
    pub const BYTES: &str = "bytes";
    pub const PARAMS: &str = "params";
    pub const USD: &str = "usd";
    pub const GPU_HOURS: &str = "gpu_hours";
    pub const KG_CO2: &str = "kg_co2";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantity {
    pub amount: f64,
    pub unit: String,
}

impl Quantity {
    pub fn new(amount: f64, unit: impl Into<String>) -> Self {
        Quantity {
            amount,
            unit: unit.into(),
        }
    }

    pub fn count(n: u64) -> Self {
        Quantity::new(n as f64, units::COUNT)
    }
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.amount, self.unit)
    }
}

/// A single attribute value.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum AttributeValue {
    Text(String),
    /// Closed-set identifier, e.g. a license id. Lower-case, hyphenated.
    Token(String),
    Quantity(Quantity),
    TextList(Vec<String>),
    #[default]
    Absent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Text,
    Token,
    Quantity,
    TextList,
    Absent,
}

/// Lower-cases and hyphenates an identifier (`"Apache 2.0"` -> `"apache-2.0"`).
pub fn normalize_token(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    for c in raw.trim().chars() {
        if c.is_whitespace() || c == '_' {
            if !out.ends_with('-') {
                out.push('-');
            }
        } else {
            out.extend(c.to_lowercase());
        }
    }
    out.trim_matches('-').to_string()
}

impl AttributeValue {
    pub fn text(s: impl Into<String>) -> Self {
        AttributeValue::Text(s.into())
    }

    pub fn token(s: &str) -> Self {
        AttributeValue::Token(normalize_token(s))
    }

    pub fn quantity(amount: f64, unit: &str) -> Self {
        AttributeValue::Quantity(Quantity::new(amount, unit))
    }

    pub fn list<I, S>(items: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        AttributeValue::TextList(items.into_iter().map(Into::into).collect())
    }

    pub fn is_absent(&self) -> bool {
        matches!(self, AttributeValue::Absent)
    }

    pub fn kind(&self) -> ValueKind {
        match self {
            AttributeValue::Text(_) => ValueKind::Text,
            AttributeValue::Token(_) => ValueKind::Token,
            AttributeValue::Quantity(_) => ValueKind::Quantity,
            AttributeValue::TextList(_) => ValueKind::TextList,
            AttributeValue::Absent => ValueKind::Absent,
        }
    }

    /// Text rendering used for indexing and prompts.
    pub fn render(&self) -> String {
        match self {
            AttributeValue::Text(s) | AttributeValue::Token(s) => s.clone(),
            AttributeValue::Quantity(q) => q.to_string(),
            AttributeValue::TextList(items) => items.join(" "),
            AttributeValue::Absent => String::new(),
        }
    }

    pub fn as_quantity(&self) -> Option<&Quantity> {
        match self {
            AttributeValue::Quantity(q) => Some(q),
            _ => None,
        }
    }

    /// Describes the first violated value invariant, if any.
    pub fn invariant_violation(&self) -> Option<String> {
        match self {
            AttributeValue::Quantity(q) => {
                if !q.amount.is_finite() {
                    Some("quantity must be finite".into())
                } else if q.amount < 0.0 {
                    Some("quantity must be non-negative".into())
                } else if q.unit.is_empty() {
                    Some("quantity unit must be non-empty".into())
                } else {
                    None
                }
            }
            AttributeValue::Token(t) => {
                if t.is_empty() {
                    Some("token must be non-empty".into())
                } else if *t != normalize_token(t) {
                    Some("token must be lower-case and hyphenated".into())
                } else {
                    None
                }
            }
            _ => None,
        }
    }

    pub fn to_wire(&self) -> (Value, ValueKind) {
        let value = match self {
            AttributeValue::Text(s) | AttributeValue::Token(s) => Value::String(s.clone()),
            AttributeValue::Quantity(q) => json!({ "amount": q.amount, "unit": q.unit }),
            AttributeValue::TextList(items) => json!(items),
            AttributeValue::Absent => Value::Null,
        };
        (value, self.kind())
    }

    /// Decodes a wire value. A missing kind is inferred from the JSON type.
    pub fn from_wire(key: &str, value: &Value, kind: Option<ValueKind>) -> Result<Self, MetadataError> {
        let bad = |reason: &str| MetadataError::MalformedAttribute {
            key: key.to_string(),
            reason: reason.to_string(),
        };
        let kind = match kind {
            Some(k) => k,
            None => match value {
                Value::Null => ValueKind::Absent,
                Value::String(_) => ValueKind::Text,
                Value::Array(_) => ValueKind::TextList,
                Value::Object(_) | Value::Number(_) => ValueKind::Quantity,
                Value::Bool(_) => return Err(bad("boolean values are not supported")),
            },
        };
        Ok(match kind {
            ValueKind::Absent => AttributeValue::Absent,
            ValueKind::Text => AttributeValue::Text(value.as_str().ok_or_else(|| bad("expected string"))?.to_string()),
            ValueKind::Token => AttributeValue::Token(value.as_str().ok_or_else(|| bad("expected string"))?.to_string()),
            ValueKind::TextList => {
                let items = value.as_array().ok_or_else(|| bad("expected array"))?;
                let items = items
                    .iter()
                    .map(|v| v.as_str().map(str::to_string))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| bad("expected array of strings"))?;
                AttributeValue::TextList(items)
            }
            ValueKind::Quantity => match value {
                Value::Number(n) => {
                    let unit = key
                        .parse::<AttributeKey>()
                        .ok()
                        .and_then(AttributeKey::default_unit)
                        .ok_or_else(|| bad("bare number needs a unit"))?;
                    AttributeValue::quantity(n.as_f64().ok_or_else(|| bad("bad number"))?, unit)
                }
                Value::Object(obj) => {
                    let amount = obj
                        .get("amount")
                        .and_then(Value::as_f64)
                        .ok_or_else(|| bad("quantity needs numeric `amount`"))?;
                    let unit = obj
                        .get("unit")
                        .and_then(Value::as_str)
                        .ok_or_else(|| bad("quantity needs string `unit`"))?;
                    AttributeValue::quantity(amount, unit)
                }
                _ => return Err(bad("expected quantity object")),
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    CardExtracted,
    PublicityTag,
    /// Both sources supplied the key.
    Consolidated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extractor {
    Llm,
    Heuristic,
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: Source,
    pub extractor: Extractor,
}

impl Provenance {
    pub fn new(source: Source, extractor: Extractor) -> Self {
        Provenance { source, extractor }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attribute {
    pub value: AttributeValue,
    pub provenance: Provenance,
}

impl Attribute {
    pub fn new(value: AttributeValue, provenance: Provenance) -> Self {
        Attribute { value, provenance }
    }
}

pub type AttributeMap = BTreeMap<AttributeKey, Attribute>;

/// SHA-256 of the raw card text, hex encoded.
pub fn card_digest(raw: &str) -> String {
    hex::encode(Sha256::digest(raw.as_bytes()))
}

/// One model's populated template instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRecord {
    pub registry_name: String,
    pub attributes: AttributeMap,
    pub card_digest: String,
}

static ABSENT: AttributeValue = AttributeValue::Absent;

impl ModelRecord {
    pub fn new(registry_name: impl Into<String>, card_digest: impl Into<String>) -> Self {
        ModelRecord {
            registry_name: registry_name.into(),
            attributes: BTreeMap::new(),
            card_digest: card_digest.into(),
        }
    }

    pub fn with(mut self, key: AttributeKey, value: AttributeValue, provenance: Provenance) -> Self {
        self.attributes.insert(key, Attribute::new(value, provenance));
        self
    }

    pub fn get(&self, key: AttributeKey) -> &AttributeValue {
        self.attributes.get(&key).map(|a| &a.value).unwrap_or(&ABSENT)
    }

    pub fn present_keys(&self) -> impl Iterator<Item = AttributeKey> + '_ {
        self.attributes
            .iter()
            .filter(|(_, a)| !a.value.is_absent())
            .map(|(k, _)| *k)
    }

    pub fn to_json(&self) -> Value {
        let mut attrs = Map::new();
        for (key, attr) in &self.attributes {
            let (value, kind) = attr.value.to_wire();
            attrs.insert(
                key.as_str().to_string(),
                json!({
                    "value": value,
                    "value_kind": kind,
                    "source": attr.provenance.source,
                    "extractor": attr.provenance.extractor,
                }),
            );
        }
        json!({
            "registry_name": self.registry_name,
            "attributes": attrs,
            "card_digest": self.card_digest,
        })
    }

    /// One corpus line. serde_json maps are sorted, so the encoding is canonical.
    pub fn to_line(&self) -> String {
        self.to_json().to_string()
    }

    pub fn from_json(value: &Value) -> Result<Self, MetadataError> {
        let obj = value
            .as_object()
            .ok_or_else(|| MetadataError::Malformed("record must be an object".into()))?;
        let registry_name = obj
            .get("registry_name")
            .and_then(Value::as_str)
            .ok_or_else(|| MetadataError::Malformed("missing registry_name".into()))?
            .to_string();
        let card_digest = obj
            .get("card_digest")
            .and_then(Value::as_str)
            .ok_or_else(|| MetadataError::Malformed("missing card_digest".into()))?
            .to_string();
        let mut attributes = BTreeMap::new();
        if let Some(attrs) = obj.get("attributes") {
            let attrs = attrs
                .as_object()
                .ok_or_else(|| MetadataError::Malformed("attributes must be an object".into()))?;
            for (name, entry) in attrs {
                let key: AttributeKey = name.parse()?;
                let entry: WireAttribute = serde_json::from_value(entry.clone()).map_err(|e| {
                    MetadataError::MalformedAttribute {
                        key: name.clone(),
                        reason: e.to_string(),
                    }
                })?;
                let value = AttributeValue::from_wire(name, &entry.value, Some(entry.value_kind))?;
                attributes.insert(
                    key,
                    Attribute::new(value, Provenance::new(entry.source, entry.extractor)),
                );
            }
        }
        Ok(ModelRecord {
            registry_name,
            attributes,
            card_digest,
        })
    }

    pub fn from_line(line: &str) -> Result<Self, MetadataError> {
        let value: Value =
            serde_json::from_str(line).map_err(|e| MetadataError::Malformed(e.to_string()))?;
        Self::from_json(&value)
    }
}

#[derive(Deserialize)]
struct WireAttribute {
    #[serde(default)]
    value: Value,
    value_kind: ValueKind,
    source: Source,
    extractor: Extractor,
}

/// A problem found by [`validate_record`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub key: Option<AttributeKey>,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.key {
            Some(k) => write!(f, "{k}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

pub fn validate_record(record: &ModelRecord) -> Vec<Issue> {
    let mut issues = Vec::new();
    if record.registry_name.trim().is_empty() {
        issues.push(Issue {
            key: None,
            message: "registry_name must be non-empty".into(),
        });
    }
    for (key, attr) in &record.attributes {
        if let Some(message) = attr.value.invariant_violation() {
            issues.push(Issue {
                key: Some(*key),
                message,
            });
        }
    }
    if record.present_keys().next().is_none() {
        issues.push(Issue {
            key: None,
            message: "empty record".into(),
        });
    }
    issues
}

/// Merges card-extracted and hub-tag attributes into one map.
///
/// Keys supplied by both sources get [`Source::Consolidated`] provenance and
/// the publicity value. Keys from one source pass through unchanged.
pub fn consolidate_fields(literature: &AttributeMap, publicity: &AttributeMap) -> AttributeMap {
    let mut out = AttributeMap::new();
    let keys: BTreeSet<AttributeKey> = literature.keys().chain(publicity.keys()).copied().collect();
    for key in keys {
        let lit = literature.get(&key).filter(|a| !a.value.is_absent());
        let publ = publicity.get(&key).filter(|a| !a.value.is_absent());
        let merged = match (lit, publ) {
            (Some(_), Some(p)) => Attribute::new(
                p.value.clone(),
                Provenance::new(Source::Consolidated, p.provenance.extractor),
            ),
            (Some(a), None) | (None, Some(a)) => a.clone(),
            (None, None) => continue,
        };
        out.insert(key, merged);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationKind {
    ClosedSetSubstitute,
    FreeTextInfill,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationStrategy {
    pub kind: MutationKind,
    pub target_key: AttributeKey,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RequestOrigin {
    #[default]
    Developer,
    Synthesized {
        origin_model: String,
        strategies: Vec<MutationStrategy>,
    },
}

/// A developer- or synthesizer-populated template instance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SearchRequest {
    pub request_id: String,
    pub attributes: BTreeMap<AttributeKey, AttributeValue>,
    pub origin: RequestOrigin,
}

impl SearchRequest {
    pub fn new(request_id: impl Into<String>) -> Self {
        SearchRequest {
            request_id: request_id.into(),
            ..Default::default()
        }
    }

    pub fn with(mut self, key: AttributeKey, value: AttributeValue) -> Self {
        self.attributes.insert(key, value);
        self
    }

    pub fn get(&self, key: AttributeKey) -> &AttributeValue {
        self.attributes.get(&key).unwrap_or(&ABSENT)
    }

    pub fn present_keys(&self) -> impl Iterator<Item = AttributeKey> + '_ {
        self.attributes
            .iter()
            .filter(|(_, v)| !v.is_absent())
            .map(|(k, _)| *k)
    }

    pub fn validate(&self) -> Result<(), MetadataError> {
        for (key, value) in &self.attributes {
            if let Some(reason) = value.invariant_violation() {
                return Err(MetadataError::MalformedAttribute {
                    key: key.to_string(),
                    reason,
                });
            }
        }
        if !self.present_keys().any(AttributeKey::is_trivial) {
            return Err(MetadataError::NoTrivialFields);
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        let mut attrs = Map::new();
        for (key, value) in &self.attributes {
            let (value, kind) = value.to_wire();
            attrs.insert(key.as_str().into(), json!({ "value": value, "value_kind": kind }));
        }
        json!({
            "request_id": self.request_id,
            "attributes": attrs,
            "origin": self.origin,
        })
    }

    pub fn to_line(&self) -> String {
        self.to_json().to_string()
    }

    /// Parses the request schema. `value_kind` may be omitted, and an
    /// attribute may be given as a bare string or list.
    pub fn from_json(value: &Value) -> Result<Self, MetadataError> {
        let obj = value
            .as_object()
            .ok_or_else(|| MetadataError::Malformed("request must be an object".into()))?;
        let request_id = obj
            .get("request_id")
            .and_then(Value::as_str)
            .unwrap_or("request")
            .to_string();
        let origin = match obj.get("origin") {
            None | Some(Value::Null) => RequestOrigin::Developer,
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| MetadataError::Malformed(format!("origin: {e}")))?,
        };
        let attrs = obj
            .get("attributes")
            .and_then(Value::as_object)
            .ok_or_else(|| MetadataError::Malformed("missing attributes object".into()))?;
        let mut attributes = BTreeMap::new();
        for (name, entry) in attrs {
            let key: AttributeKey = name.parse()?;
            let value = match entry {
                Value::Object(o) if o.contains_key("value") || o.contains_key("value_kind") => {
                    let kind = match o.get("value_kind") {
                        Some(k) => Some(serde_json::from_value(k.clone()).map_err(|e| {
                            MetadataError::MalformedAttribute {
                                key: name.clone(),
                                reason: e.to_string(),
                            }
                        })?),
                        None => None,
                    };
                    AttributeValue::from_wire(name, o.get("value").unwrap_or(&Value::Null), kind)?
                }
                other => AttributeValue::from_wire(name, other, None)?,
            };
            let value = match (key, value) {
                (AttributeKey::License, AttributeValue::Text(t)) => AttributeValue::token(&t),
                (_, v) => v,
            };
            attributes.insert(key, value);
        }
        Ok(SearchRequest {
            request_id,
            attributes,
            origin,
        })
    }

    pub fn from_line(line: &str) -> Result<Self, MetadataError> {
        let value: Value =
            serde_json::from_str(line).map_err(|e| MetadataError::Malformed(e.to_string()))?;
        Self::from_json(&value)
    }
}

/// Splits a request's present keys into special and trivial sets.
pub fn partition_attributes(
    request: &SearchRequest,
) -> (BTreeSet<AttributeKey>, BTreeSet<AttributeKey>) {
    request.present_keys().partition(|k| k.is_special())
}
