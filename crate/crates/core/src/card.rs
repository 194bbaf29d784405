//! Model card parsing, hub tag mapping, corpus persistence and statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metadata::{
    Attribute, AttributeKey, AttributeMap, AttributeValue, Extractor, ModelRecord, Provenance,
    Quantity, Source,
};

#[derive(Debug, Error)]
pub enum CardError {
    #[error("card `{0}` is not valid UTF-8")]
    InvalidEncoding(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed line {line_no}: {reason}")]
    MalformedLine { line_no: usize, reason: String },
    #[error("duplicate registry name `{name}` on line {line_no}")]
    DuplicateRecord { name: String, line_no: usize },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CardError + '_ {
    move |source| CardError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A front-matter value, flattened to strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrontValue {
    Scalar(String),
    List(Vec<String>),
}

impl FrontValue {
    pub fn items(&self) -> Vec<String> {
        match self {
            FrontValue::Scalar(s) if s.is_empty() => Vec::new(),
            FrontValue::Scalar(s) => vec![s.clone()],
            FrontValue::List(items) => items.clone(),
        }
    }

    pub fn first(&self) -> Option<&str> {
        match self {
            FrontValue::Scalar(s) if !s.is_empty() => Some(s),
            FrontValue::List(items) => items.first().map(String::as_str),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCard {
    pub registry_name: String,
    pub front_matter: BTreeMap<String, FrontValue>,
    /// The fenced block exactly as it appeared, fences included. Empty when
    /// there was no front matter or it could not be parsed.
    pub front_matter_block: String,
    pub body: String,
    pub raw: String,
    /// Set when a front-matter fence was found but could not be parsed.
    pub warning: Option<String>,
}

impl ModelCard {
    pub fn reconstruct(&self) -> String {
        format!("{}{}", self.front_matter_block, self.body)
    }
}

pub fn parse_card_bytes(raw: &[u8], registry_name: &str) -> Result<ModelCard, CardError> {
    let text =
        std::str::from_utf8(raw).map_err(|_| CardError::InvalidEncoding(registry_name.into()))?;
    Ok(parse_card(text, registry_name))
}

/// Splits a card into YAML front matter and Markdown body. Never fails:
/// malformed front matter leaves the whole text in `body` and sets `warning`.
pub fn parse_card(raw: &str, registry_name: &str) -> ModelCard {
    let plain = |warning: Option<String>| ModelCard {
        registry_name: registry_name.to_string(),
        front_matter: BTreeMap::new(),
        front_matter_block: String::new(),
        body: raw.to_string(),
        raw: raw.to_string(),
        warning,
    };

    let Some(after_open) = raw
        .strip_prefix("---\n")
        .or_else(|| raw.strip_prefix("---\r\n"))
    else {
        return plain(None);
    };
    let open_len = raw.len() - after_open.len();

    // Find the closing fence line.
    let mut offset = 0;
    let mut close = None;
    for line in after_open.split_inclusive('\n') {
        let trimmed = line.trim_end_matches(['\n', '\r']);
        if trimmed == "---" || trimmed == "..." {
            close = Some((offset, offset + line.len()));
            break;
        }
        offset += line.len();
    }
    let Some((yaml_end, block_end)) = close else {
        return plain(Some("front matter fence is never closed".into()));
    };

    let yaml = &after_open[..yaml_end];
    match parse_front_matter(yaml) {
        Ok(front_matter) => ModelCard {
            registry_name: registry_name.to_string(),
            front_matter,
            front_matter_block: raw[..open_len + block_end].to_string(),
            body: after_open[block_end..].to_string(),
            raw: raw.to_string(),
            warning: None,
        },
        Err(reason) => plain(Some(format!("malformed front matter: {reason}"))),
    }
}

fn parse_front_matter(yaml: &str) -> Result<BTreeMap<String, FrontValue>, String> {
    let value: serde_yaml::Value = serde_yaml::from_str(yaml).map_err(|e| e.to_string())?;
    let mapping = match value {
        serde_yaml::Value::Null => return Ok(BTreeMap::new()),
        serde_yaml::Value::Mapping(m) => m,
        _ => return Err("front matter is not a mapping".into()),
    };
    let mut out = BTreeMap::new();
    for (k, v) in mapping {
        let key = yaml_scalar(&k);
        let value = match v {
            serde_yaml::Value::Sequence(items) => {
                FrontValue::List(items.iter().map(yaml_scalar).collect())
            }
            other => FrontValue::Scalar(yaml_scalar(&other)),
        };
        out.insert(key, value);
    }
    Ok(out)
}

fn yaml_scalar(value: &serde_yaml::Value) -> String {
    use serde_yaml::Value as Y;
    match value {
        Y::Null => String::new(),
        Y::Bool(b) => b.to_string(),
        Y::Number(n) => n.to_string(),
        Y::String(s) => s.clone(),
        Y::Tagged(t) => yaml_scalar(&t.value),
        nested => serde_json::to_string(nested)
            .or_else(|_| serde_yaml::to_string(nested).map(|s| s.trim().to_string()))
            .unwrap_or_default(),
    }
}

/// False iff both body and front matter are empty after whitespace stripping.
pub fn is_valid_card(card: &ModelCard) -> bool {
    !(card.body.trim().is_empty() && card.front_matter.is_empty())
}

/// Hub-side popularity data for one model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HubListing {
    pub registry_name: String,
    #[serde(default)]
    pub downloads: u64,
    #[serde(default)]
    pub likes: u64,
    /// Taken from git history when available; the hub model-info API does
    /// not report it.
    #[serde(default)]
    pub contributors: Option<u64>,
    #[serde(default)]
    pub commits: Option<u64>,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub task: Option<String>,
    #[serde(default)]
    pub first_commit_year: Option<i32>,
    #[serde(default)]
    pub last_commit_year: Option<i32>,
}

impl HubListing {
    pub fn new(registry_name: impl Into<String>) -> Self {
        HubListing {
            registry_name: registry_name.into(),
            downloads: 0,
            likes: 0,
            contributors: None,
            commits: None,
            tags: Vec::new(),
            task: None,
            first_commit_year: None,
            last_commit_year: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PublicityFields {
    pub attributes: AttributeMap,
    pub ignored_keys: Vec<String>,
}

const FRONT_MATTER_MAP: [(&str, AttributeKey); 5] = [
    ("license", AttributeKey::License),
    ("language", AttributeKey::Language),
    ("datasets", AttributeKey::Dataset),
    ("library_name", AttributeKey::Framework),
    ("pipeline_tag", AttributeKey::Task),
];

/// Maps the allow-listed front-matter keys and listing counts onto template
/// attributes. A listing for a different model is ignored.
pub fn publicity_to_fields(card: &ModelCard, listing: Option<&HubListing>) -> PublicityFields {
    let prov = Provenance::new(Source::PublicityTag, Extractor::Manual);
    let mut out = PublicityFields::default();
    for (name, value) in &card.front_matter {
        let Some(&(_, key)) = FRONT_MATTER_MAP.iter().find(|(k, _)| k == name) else {
            out.ignored_keys.push(name.clone());
            continue;
        };
        let value = match key {
            AttributeKey::Language | AttributeKey::Dataset => {
                let items = value.items();
                if items.is_empty() {
                    continue;
                }
                AttributeValue::TextList(items)
            }
            _ => match value.first() {
                Some(v) => AttributeValue::token(v),
                None => continue,
            },
        };
        if let AttributeValue::Token(t) = &value {
            if t.is_empty() {
                continue;
            }
        }
        out.attributes.insert(key, Attribute::new(value, prov));
    }

    let listing = match listing {
        Some(l) if l.registry_name == card.registry_name => Some(l),
        Some(l) => {
            log::warn!(
                "listing for `{}` ignored while mapping card `{}`",
                l.registry_name,
                card.registry_name
            );
            None
        }
        None => None,
    };
    if let Some(l) = listing {
        let mut put = |key, value| {
            out.attributes.insert(key, Attribute::new(value, prov));
        };
        put(AttributeKey::ModelName, AttributeValue::text(l.registry_name.clone()));
        put(AttributeKey::Downloads, AttributeValue::Quantity(Quantity::count(l.downloads)));
        put(AttributeKey::Likes, AttributeValue::Quantity(Quantity::count(l.likes)));
        if let Some(c) = l.contributors {
            put(AttributeKey::Contributors, AttributeValue::Quantity(Quantity::count(c)));
        }
        if let Some(c) = l.commits {
            put(AttributeKey::Commits, AttributeValue::Quantity(Quantity::count(c)));
        }
    }
    if let Some(task) = listing.and_then(|l| l.task.as_deref()) {
        if !out.attributes.contains_key(&AttributeKey::Task) && !task.trim().is_empty() {
            out.attributes
                .insert(AttributeKey::Task, Attribute::new(AttributeValue::token(task), prov));
        }
    }
    out
}

/// Lower median: element `(n - 1) / 2` of the sorted values.
pub fn lower_median(values: &[u64]) -> Option<u64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    let mid = (sorted.len() - 1) / 2;
    let (_, m, _) = sorted.select_nth_unstable(mid);
    Some(*m)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub total: usize,
    pub valid: usize,
    pub zero_download: usize,
    pub median_contributors: Option<u64>,
    pub median_commits: Option<u64>,
    pub median_downloads: Option<u64>,
    pub median_likes: Option<u64>,
    pub presence: BTreeMap<AttributeKey, usize>,
}

/// Computes corpus statistics. `records` are the models with valid cards;
/// `listings` may cover models whose card was missing or empty.
pub fn corpus_stats(records: &[ModelRecord], listings: &[HubListing]) -> Result<CorpusStats, CardError> {
    if records.is_empty() && listings.is_empty() {
        return Err(CardError::EmptyCorpus);
    }
    let by_name: BTreeMap<&str, &HubListing> =
        listings.iter().map(|l| (l.registry_name.as_str(), l)).collect();
    let record_names: BTreeSet<&str> = records.iter().map(|r| r.registry_name.as_str()).collect();
    let all_names: BTreeSet<&str> = record_names.iter().copied().chain(by_name.keys().copied()).collect();
    let records_by_name: BTreeMap<&str, &ModelRecord> =
        records.iter().map(|r| (r.registry_name.as_str(), r)).collect();

    let count_of = |name: &str, key: AttributeKey| -> Option<u64> {
        if let Some(l) = by_name.get(name) {
            let v = match key {
                AttributeKey::Downloads => Some(l.downloads),
                AttributeKey::Likes => Some(l.likes),
                AttributeKey::Contributors => l.contributors,
                AttributeKey::Commits => l.commits,
                _ => None,
            };
            if v.is_some() {
                return v;
            }
        }
        records_by_name
            .get(name)
            .and_then(|r| r.get(key).as_quantity())
            .map(|q| q.amount.max(0.0) as u64)
    };
    let median_of = |key| {
        let values: Vec<u64> = all_names.iter().filter_map(|n| count_of(n, key)).collect();
        lower_median(&values)
    };

    let mut presence = BTreeMap::new();
    for record in records {
        for key in record.present_keys() {
            *presence.entry(key).or_insert(0) += 1;
        }
    }
    let zero_download = record_names
        .iter()
        .filter(|n| count_of(n, AttributeKey::Downloads) == Some(0))
        .count();

    Ok(CorpusStats {
        total: all_names.len(),
        valid: record_names.len(),
        zero_download,
        median_contributors: median_of(AttributeKey::Contributors),
        median_commits: median_of(AttributeKey::Commits),
        median_downloads: median_of(AttributeKey::Downloads),
        median_likes: median_of(AttributeKey::Likes),
        presence,
    })
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = |v: Option<u64>| v.map_or_else(|| "n/a".to_string(), |v| v.to_string());
        writeln!(
            f,
            "models      total={} valid={} zero_downloads={}",
            self.total, self.valid, self.zero_download
        )?;
        writeln!(
            f,
            "medians     contributors={} commits={} downloads={} likes={}",
            m(self.median_contributors),
            m(self.median_commits),
            m(self.median_downloads),
            m(self.median_likes)
        )?;
        writeln!(f, "presence")?;
        let mut out = String::new();
        for key in AttributeKey::ALL {
            let n = self.presence.get(&key).copied().unwrap_or(0);
            let _ = writeln!(out, "  {:<18}{n}", key.as_str());
        }
        f.write_str(&out)
    }
}

pub fn store_corpus(records: &[ModelRecord], path: &Path) -> Result<(), CardError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", r.to_line()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn load_corpus(path: &Path) -> Result<Vec<ModelRecord>, CardError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record = ModelRecord::from_line(&line).map_err(|e| CardError::MalformedLine {
            line_no,
            reason: e.to_string(),
        })?;
        if !seen.insert(record.registry_name.clone()) {
            return Err(CardError::DuplicateRecord {
                name: record.registry_name,
                line_no,
            });
        }
        records.push(record);
    }
    Ok(records)
}

pub fn store_listings(listings: &[HubListing], path: &Path) -> Result<(), CardError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for l in listings {
        writeln!(w, "{}", serde_json::to_string(l).expect("listing serializes")).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn load_listings(path: &Path) -> Result<Vec<HubListing>, CardError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CardError::MalformedLine {
                line_no: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Collects `<registry_name>/README.md` files under `dir`, sorted by name.
/// Names may contain `/` (`org/model`).
pub fn read_card_dir(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, CardError> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) -> Result<(), CardError> {
        let mut entries = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .collect::<Result<Vec<_>, _>>()
            .map_err(io_err(dir))?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let path = entry.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if entry.file_name().eq_ignore_ascii_case("readme.md") && dir != root {
                let rel = dir.strip_prefix(root).unwrap_or(dir);
                let name = rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/");
                let bytes = fs::read(&path).map_err(io_err(&path))?;
                out.push((name, bytes));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}
