//! Turning model-card prose into template attributes.
//!
//! Two routes produce an [`ExtractionResult`]: [`extract_metadata`] asks a chat
//! model for a JSON object and validates it, with bounded repair retries;
//! [`fallback_extract`] applies deterministic heuristics for offline runs.
//! Both only ever emit literature attributes.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::card::ModelCard;
use crate::llm::{estimate_tokens, parse_json_object, ChatClient, ChatMessage, LlmError};
use crate::metadata::{
    units, Attribute, AttributeKey, AttributeMap, AttributeValue, Extractor, Provenance, Quantity,
    Source,
};
use crate::vocab::{prompts, task_modalities};

/// One input -> output demonstration for the extraction prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShot {
    pub card: String,
    pub output: String,
}

pub fn default_shots() -> Vec<FewShot> {
    vec![
        FewShot {
            card: "# ViT Base\n\nVision Transformer (ViT) model pre-trained on ImageNet-21k and fine-tuned on ImageNet at resolution 224x224. It classifies an image into one of 1,000 ImageNet classes. The model has 86M parameters and the checkpoint is 346 MB.\n\nCode: https://github.com/google-research/vision_transformer".into(),
            output: r#"{"function": "Image classification into one of 1,000 ImageNet classes", "input_format": "image (224x224 RGB)", "output_format": "class label", "dataset": ["imagenet-21k", "imagenet"], "fine_tuning": "yes", "parameter_size": "86M parameters", "model_size": "346 MB", "github_repo": "https://github.com/google-research/vision_transformer", "domain": "computer vision"}"#.into(),
        },
        FewShot {
            card: "# whisper-small-de\n\nThis model is a fine-tuned version of openai/whisper-small on Common Voice German. It transcribes German speech to text.\n\n## Limitations\nPerformance drops on noisy recordings and strong dialects.".into(),
            output: r#"{"function": "Speech recognition that transcribes German speech to text", "input_format": "audio", "output_format": "text transcript", "language": ["de"], "base_model": "openai/whisper-small", "fine_tuning": "yes", "dataset": ["common voice german"], "limitation": "Performance drops on noisy recordings and strong dialects", "domain": "speech"}"#.into(),
        },
        FewShot {
            card: "# FinSent\n\nA DistilBERT model for sentiment analysis of financial news headlines (positive, negative, neutral). Trained with PyTorch for 3 epochs, learning rate 2e-5, on one V100 GPU.\n\n## Bias\nHeadlines are mostly from US outlets, so the model may be biased towards US markets.".into(),
            output: r#"{"function": "Sentiment analysis of financial news headlines", "input_format": "text", "output_format": "sentiment label (positive, negative, neutral)", "framework": "pytorch", "hyper_parameters": "3 epochs, learning rate 2e-5", "hardware": "one V100 GPU", "biases": "May be biased towards US markets", "domain": "finance", "language": ["en"]}"#.into(),
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    pub shots: Vec<FewShot>,
    /// Prompt budget in (estimated) tokens.
    pub context_tokens: usize,
    /// Repair retries after the first attempt.
    pub retries: u32,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            shots: default_shots(),
            context_tokens: 4096,
            retries: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractionPrompt {
    pub system: String,
    pub shots: Vec<FewShot>,
    pub card_body: String,
    pub schema_keys: Vec<AttributeKey>,
    pub truncated: bool,
}

impl ExtractionPrompt {
    pub fn messages(&self) -> Vec<ChatMessage> {
        let mut msgs = vec![ChatMessage::system(self.system.clone())];
        for shot in &self.shots {
            msgs.push(ChatMessage::user(shot.card.clone()));
            msgs.push(ChatMessage::assistant(shot.output.clone()));
        }
        msgs.push(ChatMessage::user(self.card_body.clone()));
        msgs
    }

    pub fn render(&self) -> String {
        render_messages(&self.messages())
    }

    pub fn estimated_tokens(&self) -> usize {
        estimate_tokens(&self.render())
    }
}

fn render_messages(msgs: &[ChatMessage]) -> String {
    msgs.iter()
        .map(|m| format!("[{}]\n{}", m.role, m.content))
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn take_chars(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Renders the extraction prompt, cutting the card body from the tail when
/// the whole prompt would exceed `context_tokens`.
pub fn build_extraction_prompt(card: &ModelCard, shots: &[FewShot], context_tokens: usize) -> ExtractionPrompt {
    let schema_keys: Vec<AttributeKey> = AttributeKey::literature_keys().collect();
    let key_list = schema_keys
        .iter()
        .map(|k| k.as_str())
        .collect::<Vec<_>>()
        .join(", ");
    let mut prompt = ExtractionPrompt {
        system: prompts::extraction_system().render(&[("keys", &key_list)]),
        shots: shots.to_vec(),
        card_body: String::new(),
        schema_keys,
        truncated: false,
    };
    let fixed_chars = prompt.render().chars().count();
    let budget_chars = context_tokens.saturating_mul(4);
    let available = budget_chars.saturating_sub(fixed_chars);
    let body = card.body.trim();
    if body.chars().count() > available {
        prompt.card_body = take_chars(body, available).to_string();
        prompt.truncated = true;
    } else {
        prompt.card_body = body.to_string();
    }
    prompt
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionResult {
    pub attributes: AttributeMap,
    /// Whether each key's value had the expected shape.
    pub key_validity: BTreeMap<AttributeKey, bool>,
    pub schema_valid: bool,
    pub raw_response: String,
    pub attempts: u32,
}

impl ExtractionResult {
    fn empty(raw_response: String, attempts: u32, schema_valid: bool) -> Self {
        ExtractionResult {
            attributes: AttributeMap::new(),
            key_validity: BTreeMap::new(),
            schema_valid,
            raw_response,
            attempts,
        }
    }
}

const LIST_KEYS: [AttributeKey; 2] = [AttributeKey::Language, AttributeKey::Dataset];
const TOKEN_KEYS: [AttributeKey; 2] = [AttributeKey::Framework, AttributeKey::FineTuning];
const QUANTITY_KEYS: [AttributeKey; 6] = [
    AttributeKey::ModelSize,
    AttributeKey::ParameterSize,
    AttributeKey::TrainingCost,
    AttributeKey::InferenceCost,
    AttributeKey::CarbonEmitted,
    AttributeKey::Hardware,
];

fn is_placeholder(s: &str) -> bool {
    matches!(
        s.trim().to_lowercase().as_str(),
        "" | "n/a" | "na" | "none" | "null" | "unknown" | "not specified" | "not mentioned" | "not provided" | "-"
    )
}

fn quantity_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)^(?:~|about|around|approx(?:imately|\.)?)?\s*(\$)?\s*(\d[\d,]*(?:\.\d+)?)\s*(?:(thousand|million|billion|trillion|[kmbt])\b)?\s*(.*)$",
        )
        .unwrap()
    })
}

/// Parses strings like `"1.5 GB"`, `"110M parameters"`, `"$500"` or
/// `"100 GPU hours"`. A bare number takes the key's default unit.
pub fn parse_quantity(key: AttributeKey, text: &str) -> Option<Quantity> {
    let caps = quantity_regex().captures(text.trim())?;
    let dollar = caps.get(1).is_some();
    let mut amount: f64 = caps[2].replace(',', "").parse().ok()?;
    if let Some(m) = caps.get(3) {
        amount *= match m.as_str().to_lowercase().as_str() {
            "k" | "thousand" => 1e3,
            "m" | "million" => 1e6,
            "b" | "billion" => 1e9,
            "t" | "trillion" => 1e12,
            _ => 1.0,
        };
    }
    let rest = caps[4].trim().to_lowercase();
    let mut words = rest.split_whitespace();
    let first = words.next().unwrap_or("");
    let tail: Vec<&str> = words.collect();

    let (unit, factor, allow_tail) = match first.trim_end_matches(['.', ',']) {
        "" if dollar => (units::USD, 1.0, false),
        "" => (key.default_unit()?, 1.0, false),
        "b" | "byte" | "bytes" => (units::BYTES, 1.0, true),
        "kb" => (units::BYTES, 1e3, true),
        "mb" => (units::BYTES, 1e6, true),
        "gb" => (units::BYTES, 1e9, true),
        "tb" => (units::BYTES, 1e12, true),
        "kib" => (units::BYTES, 1024.0, true),
        "mib" => (units::BYTES, 1024.0 * 1024.0, true),
        "gib" => (units::BYTES, 1024.0 * 1024.0 * 1024.0, true),
        "tib" => (units::BYTES, 1024f64.powi(4), true),
        "params" | "parameters" | "parameter" => (units::PARAMS, 1.0, false),
        "usd" | "dollars" | "dollar" => (units::USD, 1.0, false),
        "gpu" if tail.first().is_some_and(|w| w.starts_with("hour") || w.starts_with("hr")) => {
            (units::GPU_HOURS, 1.0, false)
        }
        "gpu-hours" | "gpu-hour" | "hours" | "hour" | "hrs" => (units::GPU_HOURS, 1.0, false),
        "kg" | "kgs" => (units::KG_CO2, 1.0, true),
        "g" | "grams" => (units::KG_CO2, 1e-3, true),
        "t" | "tons" | "tonnes" => (units::KG_CO2, 1e3, true),
        _ => return None,
    };
    let tail_ok = match unit {
        units::GPU_HOURS if first == "gpu" => tail.len() == 1,
        units::KG_CO2 => tail.iter().all(|w| w.contains("co2") || *w == "of" || *w == "eq" || *w == "emitted"),
        _ => tail.is_empty() || (allow_tail && key == AttributeKey::Hardware),
    };
    if !tail_ok {
        return None;
    }
    let amount = amount * factor;
    (amount.is_finite() && amount >= 0.0).then(|| Quantity::new(amount, unit))
}

/// Coerces a JSON value from a model response into an attribute value.
/// Returns `None` for empty or placeholder values; the flag reports whether
/// the JSON shape matched what the key expects.
pub fn coerce_value(key: AttributeKey, value: &Value) -> Option<(AttributeValue, bool)> {
    match value {
        Value::Null => None,
        Value::Bool(b) => {
            let t = if *b { "yes" } else { "no" };
            Some((AttributeValue::token(t), key == AttributeKey::FineTuning))
        }
        Value::Number(n) => {
            let amount = n.as_f64()?;
            match key.default_unit() {
                Some(unit) if amount >= 0.0 => Some((AttributeValue::quantity(amount, unit), true)),
                _ => Some((AttributeValue::text(n.to_string()), false)),
            }
        }
        Value::String(s) => {
            let s = s.trim();
            if is_placeholder(s) {
                return None;
            }
            if LIST_KEYS.contains(&key) {
                let items: Vec<String> = s
                    .split(',')
                    .map(|p| p.trim().to_string())
                    .filter(|p| !is_placeholder(p))
                    .collect();
                return (!items.is_empty()).then_some((AttributeValue::TextList(items), true));
            }
            if TOKEN_KEYS.contains(&key) {
                return Some((AttributeValue::token(s), true));
            }
            if QUANTITY_KEYS.contains(&key) {
                if let Some(q) = parse_quantity(key, s) {
                    return Some((AttributeValue::Quantity(q), true));
                }
            }
            Some((AttributeValue::text(s), true))
        }
        Value::Array(items) => {
            let items: Vec<String> = items
                .iter()
                .filter_map(|v| match v {
                    Value::String(s) if !is_placeholder(s) => Some(s.trim().to_string()),
                    Value::Number(n) => Some(n.to_string()),
                    _ => None,
                })
                .collect();
            if items.is_empty() {
                return None;
            }
            if TOKEN_KEYS.contains(&key) || QUANTITY_KEYS.contains(&key) {
                return coerce_value(key, &Value::String(items.join(", ")));
            }
            Some((AttributeValue::TextList(items), true))
        }
        Value::Object(_) => Some((AttributeValue::text(value.to_string()), false)),
    }
}

fn attributes_from_object(
    obj: &serde_json::Map<String, Value>,
    extractor: Extractor,
) -> (AttributeMap, BTreeMap<AttributeKey, bool>) {
    let prov = Provenance::new(Source::CardExtracted, extractor);
    let mut attributes = AttributeMap::new();
    let mut validity = BTreeMap::new();
    for (name, value) in obj {
        let Ok(key) = name.trim().parse::<AttributeKey>() else {
            continue;
        };
        if !key.is_literature() {
            continue;
        }
        if let Some((value, ok)) = coerce_value(key, value) {
            attributes.insert(key, Attribute::new(value, prov));
            validity.insert(key, ok);
        }
    }
    (attributes, validity)
}

/// Asks the chat model for the card's literature attributes.
///
/// A reply that is not a JSON object triggers a repair turn, up to
/// `config.retries` times. When every attempt fails the result is returned
/// with `schema_valid = false` and no attributes.
pub fn extract_metadata(
    card: &ModelCard,
    client: &dyn ChatClient,
    config: &ExtractionConfig,
) -> Result<ExtractionResult, LlmError> {
    let prompt = build_extraction_prompt(card, &config.shots, config.context_tokens);
    let needed = prompt.estimated_tokens();
    if needed > config.context_tokens {
        return Err(LlmError::BudgetExceeded {
            needed,
            budget: config.context_tokens,
        });
    }
    let mut messages = prompt.messages();
    let total = config.retries + 1;
    let mut last = String::new();
    for attempt in 1..=total {
        let reply = client.complete(&messages)?;
        if let Some(obj) = parse_json_object(&reply) {
            let (attributes, key_validity) = attributes_from_object(&obj, Extractor::Llm);
            return Ok(ExtractionResult {
                attributes,
                key_validity,
                schema_valid: true,
                raw_response: reply,
                attempts: attempt,
            });
        }
        messages.push(ChatMessage::assistant(reply.clone()));
        messages.push(ChatMessage::user(prompts::extraction_repair().text()));
        last = reply;
    }
    Ok(ExtractionResult::empty(last, total, false))
}

struct Patterns {
    github: Regex,
    report: Regex,
    base_model: Regex,
    fine_tune: Regex,
    link: Regex,
    emphasis: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        github: Regex::new(r"https?://(?:www\.)?github\.com/[A-Za-z0-9_.-]+/[A-Za-z0-9_.-]+").unwrap(),
        report: Regex::new(
            r"https?://(?:www\.)?(?:arxiv\.org/(?:abs|pdf)/\d{4}\.\d{4,5}(?:v\d+)?|doi\.org/10\.[^\s)\]>]+)",
        )
        .unwrap(),
        base_model: Regex::new(
            r"(?i)fine[- ]?tuned\s+(?:version\s+of|from|on\s+top\s+of)\s+(?:the\s+)?\[?`?([A-Za-z0-9][\w./-]*[A-Za-z0-9])",
        )
        .unwrap(),
        fine_tune: Regex::new(r"(?i)fine[- ]?tun").unwrap(),
        link: Regex::new(r"!?\[([^\]]*)\]\([^)]*\)").unwrap(),
        emphasis: Regex::new(r"[*_`]+").unwrap(),
    })
}

fn is_prose_line(line: &str) -> bool {
    let t = line.trim_start();
    !(t.starts_with('#')
        || t.starts_with('<')
        || t.starts_with("![")
        || t.starts_with("[![")
        || t.starts_with('|')
        || t.starts_with("---")
        || t.starts_with("***")
        || t.starts_with("===")
        || t.starts_with("```"))
}

fn is_list_line(line: &str) -> bool {
    let t = line.trim_start();
    t.starts_with("- ") || t.starts_with("* ") || t.starts_with("+ ") || t.split_once(". ").is_some_and(|(n, _)| n.chars().all(|c| c.is_ascii_digit()) && !n.is_empty())
}

/// First paragraph of running prose in a Markdown body, markup stripped.
fn first_paragraph(body: &str) -> Option<String> {
    let mut paragraphs: Vec<Vec<&str>> = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    let mut in_code = false;
    for line in body.lines() {
        if line.trim_start().starts_with("```") {
            in_code = !in_code;
            if !current.is_empty() {
                paragraphs.push(std::mem::take(&mut current));
            }
            continue;
        }
        if in_code {
            continue;
        }
        if line.trim().is_empty() || !is_prose_line(line) {
            if !current.is_empty() {
                paragraphs.push(std::mem::take(&mut current));
            }
            continue;
        }
        current.push(line.trim());
    }
    if !current.is_empty() {
        paragraphs.push(current);
    }
    let pick = paragraphs
        .iter()
        .find(|p| !p.iter().all(|l| is_list_line(l)))
        .or_else(|| paragraphs.first())?;
    let p = patterns();
    let joined = pick
        .iter()
        .map(|l| l.trim_start_matches('>').trim())
        .collect::<Vec<_>>()
        .join(" ");
    let text = p.link.replace_all(&joined, "$1");
    let text = p.emphasis.replace_all(&text, "");
    let words: Vec<&str> = text.split_whitespace().take(40).collect();
    (!words.is_empty()).then(|| words.join(" "))
}

/// Deterministic heuristic extraction for offline use.
pub fn fallback_extract(card: &ModelCard) -> ExtractionResult {
    let p = patterns();
    let prov = Provenance::new(Source::CardExtracted, Extractor::Heuristic);
    let mut attrs = AttributeMap::new();
    let mut put = |key: AttributeKey, value: AttributeValue| {
        attrs.insert(key, Attribute::new(value, prov));
    };
    let body = card.body.as_str();

    if let Some(function) = first_paragraph(body) {
        put(AttributeKey::Function, AttributeValue::text(function));
    }
    if let Some(m) = p.github.find(body) {
        let url = m.as_str().trim_end_matches('.').trim_end_matches(".git");
        put(AttributeKey::GithubRepo, AttributeValue::text(url));
    }
    if let Some(m) = p.report.find(body) {
        put(AttributeKey::Report, AttributeValue::text(m.as_str().trim_end_matches('.')));
    }
    let base = card
        .front_matter
        .get("base_model")
        .and_then(|v| v.first().map(str::to_string))
        .or_else(|| p.base_model.captures(body).map(|c| c[1].to_string()));
    if let Some(base) = base {
        put(AttributeKey::BaseModel, AttributeValue::text(base));
    }
    if p.fine_tune.is_match(body) {
        put(AttributeKey::FineTuning, AttributeValue::token("yes"));
    }
    if let Some(langs) = card.front_matter.get("language") {
        let items = langs.items();
        if !items.is_empty() {
            put(AttributeKey::Language, AttributeValue::TextList(items));
        }
    }
    if let Some(ds) = card.front_matter.get("datasets") {
        let items = ds.items();
        if !items.is_empty() {
            put(AttributeKey::Dataset, AttributeValue::TextList(items));
        }
    }
    if let Some(task) = card.front_matter.get("pipeline_tag").and_then(|v| v.first()) {
        if let Some(m) = task_modalities().get(task.trim()) {
            put(AttributeKey::InputFormat, AttributeValue::text(m.input.clone()));
            put(AttributeKey::OutputFormat, AttributeValue::text(m.output.clone()));
        }
    }

    let key_validity = attrs.keys().map(|k| (*k, true)).collect();
    ExtractionResult {
        attributes: attrs,
        key_validity,
        schema_valid: true,
        raw_response: String::new(),
        attempts: 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportVerdict {
    Supported,
    Unsupported,
    Unknown,
}

fn normalize_phrase(s: &str) -> String {
    let words: Vec<String> = s
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect();
    format!(" {} ", words.join(" "))
}

fn contained(haystack: &str, value: &AttributeValue) -> bool {
    let parts: Vec<String> = match value {
        AttributeValue::TextList(items) => items.clone(),
        AttributeValue::Quantity(q) => vec![format!("{}", q.amount)],
        other => vec![other.render()],
    };
    !parts.is_empty()
        && parts.iter().all(|p| {
            let needle = normalize_phrase(p);
            needle.trim() != "" && haystack.contains(&needle)
        })
}

/// Checks each extracted value against the card. With a client, one prompt
/// per record asks for a verdict per key; without one, a value is
/// `Supported` when its normalized text occurs in the card, else `Unknown`.
pub fn validate_extraction(
    card: &ModelCard,
    result: &ExtractionResult,
    client: Option<&dyn ChatClient>,
    retries: u32,
) -> Result<BTreeMap<AttributeKey, SupportVerdict>, LlmError> {
    if !result.schema_valid || result.attributes.is_empty() {
        return Ok(BTreeMap::new());
    }
    let Some(client) = client else {
        let haystack = normalize_phrase(&card.raw);
        return Ok(result
            .attributes
            .iter()
            .map(|(k, a)| {
                let v = if contained(&haystack, &a.value) {
                    SupportVerdict::Supported
                } else {
                    SupportVerdict::Unknown
                };
                (*k, v)
            })
            .collect());
    };

    let listing = result
        .attributes
        .iter()
        .map(|(k, a)| format!("{k}: {}", a.value.render()))
        .collect::<Vec<_>>()
        .join("\n");
    let mut messages = vec![ChatMessage::user(
        prompts::extraction_validate().render(&[("card", card.body.trim()), ("attributes", &listing)]),
    )];
    for _ in 0..=retries {
        let reply = client.complete(&messages)?;
        if let Some(obj) = parse_json_object(&reply) {
            return Ok(result
                .attributes
                .keys()
                .map(|k| {
                    let v = match obj.get(k.as_str()).and_then(Value::as_str).map(str::to_lowercase).as_deref() {
                        Some("supported") => SupportVerdict::Supported,
                        Some("unsupported") => SupportVerdict::Unsupported,
                        _ => SupportVerdict::Unknown,
                    };
                    (*k, v)
                })
                .collect());
        }
        messages.push(ChatMessage::assistant(reply));
        messages.push(ChatMessage::user(prompts::extraction_repair().text()));
    }
    Ok(result.attributes.keys().map(|k| (*k, SupportVerdict::Unknown)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::card::parse_card;
    use crate::llm::ScriptedChatClient;

    const LISTING1: &str = r#"{"function": "Generates an image from a text prompt", "input_format": "text prompt", "output_format": "image (512x512)", "task": "text-to-image", "license": "mit", "model_size": "2.1 GB", "parameter_size": "860M parameters", "language": "en, de"}"#;

    fn card(body: &str) -> ModelCard {
        parse_card(body, "org/model")
    }

    #[test]
    fn prompt_is_deterministic_and_contains_shots() {
        let c = card("# Model\n\nDoes something useful.");
        let shots = default_shots();
        assert_eq!(shots.len(), 3);
        let a = build_extraction_prompt(&c, &shots, 4096);
        let b = build_extraction_prompt(&c, &shots, 4096);
        assert_eq!(a.render(), b.render());
        assert!(!a.truncated);
        let text = a.render();
        for shot in &shots {
            assert!(text.contains(&shot.card));
            assert!(text.contains(&shot.output));
        }
        assert_eq!(a.schema_keys.len(), 26);
        assert!(a.schema_keys.iter().all(|k| k.is_literature()));
    }

    #[test]
    fn oversized_body_is_truncated_within_budget() {
        let c = card(&"lorem ipsum dolor ".repeat(5000));
        let p = build_extraction_prompt(&c, &default_shots(), 4096);
        assert!(p.truncated);
        assert!(p.estimated_tokens() <= 4096);
        assert!(c.body.starts_with(&p.card_body));
    }

    #[test]
    fn listing1_style_reply_is_parsed() {
        let client = ScriptedChatClient::new([LISTING1]);
        let r = extract_metadata(&card("x"), &client, &ExtractionConfig::default()).unwrap();
        assert!(r.schema_valid);
        assert_eq!(r.attempts, 1);
        for k in [
            AttributeKey::Function,
            AttributeKey::InputFormat,
            AttributeKey::OutputFormat,
        ] {
            assert!(r.attributes.contains_key(&k), "{k}");
        }
        // `task` and `license` are hub fields, never produced here.
        assert!(!r.attributes.contains_key(&AttributeKey::Task));
        assert!(!r.attributes.contains_key(&AttributeKey::License));
        assert_eq!(
            r.attributes[&AttributeKey::ModelSize].value,
            AttributeValue::quantity(2.1e9, units::BYTES)
        );
        assert_eq!(
            r.attributes[&AttributeKey::ParameterSize].value,
            AttributeValue::quantity(860e6, units::PARAMS)
        );
        assert_eq!(r.attributes[&AttributeKey::Language].value, AttributeValue::list(["en", "de"]));
        assert!(r.attributes.values().all(|a| a.provenance.extractor == Extractor::Llm));
    }

    #[test]
    fn retries_then_succeeds() {
        let client = ScriptedChatClient::new(["not json", "still not", LISTING1]);
        let r = extract_metadata(&card("x"), &client, &ExtractionConfig::default()).unwrap();
        assert_eq!(r.attempts, 3);
        assert!(r.schema_valid);
        let last = client.prompts().pop().unwrap();
        assert_eq!(last.last().unwrap().content, prompts::extraction_repair().text());
    }

    #[test]
    fn always_malformed_gives_invalid_empty_result() {
        let client = ScriptedChatClient::new(["a", "b", "c", "d"]);
        let r = extract_metadata(&card("x"), &client, &ExtractionConfig::default()).unwrap();
        assert!(!r.schema_valid);
        assert!(r.attributes.is_empty());
        assert_eq!(r.attempts, 3);
        assert_eq!(client.calls(), 3);
    }

    #[test]
    fn network_errors_propagate() {
        let client = ScriptedChatClient::new(Vec::<String>::new());
        client.push_error(LlmError::Network("down".into()));
        let err = extract_metadata(&card("x"), &client, &ExtractionConfig::default()).unwrap_err();
        assert_eq!(err, LlmError::Network("down".into()));
    }

    #[test]
    fn budget_exceeded_when_fixed_part_is_too_large() {
        let client = ScriptedChatClient::new([LISTING1]);
        let config = ExtractionConfig {
            context_tokens: 100,
            ..Default::default()
        };
        let err = extract_metadata(&card("x"), &client, &config).unwrap_err();
        assert!(matches!(err, LlmError::BudgetExceeded { budget: 100, .. }));
        assert_eq!(client.calls(), 0);
    }

    #[test]
    fn quantity_parsing() {
        use AttributeKey::*;
        let q = |k, s| parse_quantity(k, s);
        assert_eq!(q(ModelSize, "1.5 GB"), Some(Quantity::new(1.5e9, units::BYTES)));
        assert_eq!(q(ModelSize, "500MB"), Some(Quantity::new(5e8, units::BYTES)));
        assert_eq!(q(ParameterSize, "7B"), Some(Quantity::new(7e9, units::PARAMS)));
        assert_eq!(q(ParameterSize, "110M parameters"), Some(Quantity::new(1.1e8, units::PARAMS)));
        assert_eq!(q(TrainingCost, "$5,000"), Some(Quantity::new(5000.0, units::USD)));
        assert_eq!(q(TrainingCost, "100 GPU hours"), Some(Quantity::new(100.0, units::GPU_HOURS)));
        assert_eq!(q(Hardware, "16 GB GPU memory"), Some(Quantity::new(16e9, units::BYTES)));
        assert_eq!(q(CarbonEmitted, "12 kg CO2"), Some(Quantity::new(12.0, units::KG_CO2)));
        assert_eq!(q(Hardware, "one V100 GPU"), None);
        assert_eq!(q(ModelSize, "3 epochs"), None);
    }

    #[test]
    fn fallback_examples() {
        let r = fallback_extract(&card("See https://github.com/org/repo for code."));
        assert_eq!(
            r.attributes[&AttributeKey::GithubRepo].value,
            AttributeValue::text("https://github.com/org/repo")
        );

        let r = fallback_extract(&card("Fine-tuned from bert-base-uncased."));
        assert_eq!(r.attributes[&AttributeKey::FineTuning].value, AttributeValue::token("yes"));
        assert_eq!(
            r.attributes[&AttributeKey::BaseModel].value,
            AttributeValue::text("bert-base-uncased")
        );

        let r = fallback_extract(&card(""));
        assert!(r.attributes.is_empty());
        assert!(r.schema_valid);
    }

    #[test]
    fn fallback_function_skips_markup_and_caps_words() {
        let body = format!(
            "# Title\n\n![badge](x.png)\n\n```\ncode here\n```\n\nThis **model** does [object detection](http://x) {}\n\n## More\n",
            "word ".repeat(60)
        );
        let r = fallback_extract(&card(&body));
        let AttributeValue::Text(f) = &r.attributes[&AttributeKey::Function].value else {
            panic!()
        };
        assert!(f.starts_with("This model does object detection word"));
        assert_eq!(f.split_whitespace().count(), 40);
    }

    #[test]
    fn fallback_uses_front_matter() {
        let c = card("---\nlanguage: [en, fr]\ndatasets: squad\nbase_model: t5-small\npipeline_tag: summarization\n---\nSummarizes text.");
        let r = fallback_extract(&c);
        assert_eq!(r.attributes[&AttributeKey::Language].value, AttributeValue::list(["en", "fr"]));
        assert_eq!(r.attributes[&AttributeKey::Dataset].value, AttributeValue::list(["squad"]));
        assert_eq!(r.attributes[&AttributeKey::BaseModel].value, AttributeValue::text("t5-small"));
        assert_eq!(r.attributes[&AttributeKey::InputFormat].value, AttributeValue::text("text"));
        assert!(r.attributes.keys().all(|k| k.is_literature()));
    }

    #[test]
    fn validation_fallback_and_llm_paths() {
        let c = card("A model.\n\nLicense: MIT");
        let prov = Provenance::new(Source::CardExtracted, Extractor::Llm);
        let mut attributes = AttributeMap::new();
        attributes.insert(AttributeKey::Copyright, Attribute::new(AttributeValue::text("mit"), prov));
        attributes.insert(AttributeKey::Function, Attribute::new(AttributeValue::text("speech synthesis"), prov));
        let result = ExtractionResult {
            key_validity: attributes.keys().map(|k| (*k, true)).collect(),
            attributes,
            schema_valid: true,
            raw_response: String::new(),
            attempts: 1,
        };
        let v = validate_extraction(&c, &result, None, 2).unwrap();
        assert_eq!(v[&AttributeKey::Copyright], SupportVerdict::Supported);
        assert_eq!(v[&AttributeKey::Function], SupportVerdict::Unknown);

        let client = ScriptedChatClient::new([r#"{"function": "supported"}"#]);
        let v = validate_extraction(&c, &result, Some(&client), 2).unwrap();
        assert_eq!(v[&AttributeKey::Function], SupportVerdict::Supported);
        assert_eq!(v[&AttributeKey::Copyright], SupportVerdict::Unknown);
    }
}
