//! Per-field BM25 over the trivial attributes.
//!
//! Every (record, trivial key) pair with a non-empty value becomes one
//! document in that key's [`FieldIndex`]. A request is scored against a
//! candidate field by field: each field's BM25 score is divided by the score
//! the request text would get against itself under the same corpus
//! statistics, and the per-field ratios are averaged.
//!
//! ```text
//! idf(t)    = ln((N - df + 0.5) / (df + 0.5) + 1)
//! w(tf, l)  = tf (k1 + 1) / (tf + k1 (1 - b + b l / avgdl))
//! score(q,d) = sum over distinct t in q of idf(t) w(tf(t,d), |d|)
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metadata::{AttributeKey, ModelRecord, SearchRequest};

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("unknown document {0}")]
    UnknownDoc(DocId),
    #[error("request has no trivial attribute to rank on")]
    NoTrivialFields,
    #[error("special attribute `{0}` cannot be indexed")]
    SpecialKey(AttributeKey),
    #[error("invalid BM25 parameters: {0}")]
    InvalidParams(String),
    #[error("index file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("index was built with {found}, expected {expected}")]
    VersionMismatch { expected: String, found: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type DocId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<(), SimilarityError> {
        if !(self.k1.is_finite() && self.k1 >= 0.0) {
            return Err(SimilarityError::InvalidParams(format!("k1 = {} must be >= 0", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(SimilarityError::InvalidParams(format!("b = {} must be in [0, 1]", self.b)));
        }
        Ok(())
    }
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "in", "into", "is", "it",
    "its", "of", "on", "or", "that", "the", "this", "to", "was", "were", "with",
];

/// Tokenizer options. The default (no stopwords, no stemming) is what the
/// index uses unless configured otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub stopwords: bool,
    pub stemming: bool,
}

impl TokenizerConfig {
    pub fn version(&self) -> String {
        let mut v = String::from("alnum-lower-min2/v1");
        if self.stopwords {
            v.push_str("+stop");
        }
        if self.stemming {
            v.push_str("+stem");
        }
        v
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let mut out = tokenize(text);
        if self.stopwords {
            out.retain(|t| !STOPWORDS.contains(&t.as_str()));
        }
        if self.stemming {
            for t in &mut out {
                *t = stem(t);
            }
        }
        out
    }
}

/// Lower-cases, splits on non-alphanumeric characters and drops tokens
/// shorter than two characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2)
        .map(str::to_string)
        .collect()
}

/// Plural stripping only.
fn stem(token: &str) -> String {
    let n = token.chars().count();
    if n > 4 && token.ends_with("ies") {
        format!("{}y", &token[..token.len() - 3])
    } else if token.ends_with("sses") {
        token[..token.len() - 2].to_string()
    } else if n > 3 && token.ends_with('s') && !token.ends_with("ss") && !token.ends_with("us") && !token.ends_with("is") {
        token[..token.len() - 1].to_string()
    } else {
        token.to_string()
    }
}

pub fn idf(doc_count: usize, doc_freq: usize) -> f64 {
    let n = doc_count as f64;
    let df = doc_freq as f64;
    ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
}

/// The saturating term-frequency factor.
pub fn term_weight(tf: f64, doc_len: f64, avg_doc_len: f64, params: Bm25Params) -> f64 {
    if tf <= 0.0 {
        return 0.0;
    }
    let norm = 1.0 - params.b + params.b * doc_len / avg_doc_len;
    tf * (params.k1 + 1.0) / (tf + params.k1 * norm)
}

/// Sorted distinct query terms.
fn distinct(tokens: &[String]) -> BTreeSet<&str> {
    tokens.iter().map(String::as_str).collect()
}

/// Inverted index for one attribute.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FieldIndex {
    /// term -> (doc, term frequency), sorted by doc.
    pub postings: BTreeMap<String, Vec<(DocId, u32)>>,
    pub doc_length: BTreeMap<DocId, u32>,
    pub avg_doc_length: f64,
    pub doc_count: usize,
}

impl FieldIndex {
    /// Documents with no tokens are skipped.
    pub fn from_docs(docs: impl IntoIterator<Item = (DocId, Vec<String>)>) -> Self {
        let mut postings: BTreeMap<String, Vec<(DocId, u32)>> = BTreeMap::new();
        let mut doc_length = BTreeMap::new();
        for (doc, tokens) in docs {
            if tokens.is_empty() {
                continue;
            }
            let mut counts: BTreeMap<&str, u32> = BTreeMap::new();
            for t in &tokens {
                *counts.entry(t.as_str()).or_insert(0) += 1;
            }
            for (t, c) in counts {
                postings.entry(t.to_string()).or_default().push((doc, c));
            }
            doc_length.insert(doc, tokens.len() as u32);
        }
        for list in postings.values_mut() {
            list.sort_unstable();
        }
        let mut index = FieldIndex {
            postings,
            doc_length,
            avg_doc_length: 0.0,
            doc_count: 0,
        };
        index.refresh_stats();
        index
    }

    fn refresh_stats(&mut self) {
        self.doc_count = self.doc_length.len();
        let total: u64 = self.doc_length.values().map(|&l| u64::from(l)).sum();
        self.avg_doc_length = if self.doc_count == 0 {
            0.0
        } else {
            total as f64 / self.doc_count as f64
        };
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn term_freq(&self, term: &str, doc: DocId) -> u32 {
        self.postings
            .get(term)
            .and_then(|list| list.binary_search_by_key(&doc, |(d, _)| *d).ok().map(|i| list[i].1))
            .unwrap_or(0)
    }

    pub fn contains(&self, doc: DocId) -> bool {
        self.doc_length.contains_key(&doc)
    }

    /// Score of the query text treated as a document of this field, using
    /// this field's statistics. Zero when the field is empty.
    pub fn self_score(&self, query_tokens: &[String], params: Bm25Params) -> f64 {
        if self.doc_count == 0 || query_tokens.is_empty() {
            return 0.0;
        }
        let len = query_tokens.len() as f64;
        distinct(query_tokens)
            .into_iter()
            .map(|t| {
                let tf = query_tokens.iter().filter(|q| q.as_str() == t).count() as f64;
                idf(self.doc_count, self.doc_freq(t)) * term_weight(tf, len, self.avg_doc_length, params)
            })
            .sum()
    }

    /// Raw scores for every document containing a query term.
    fn score_postings(&self, query_tokens: &[String], params: Bm25Params) -> HashMap<DocId, f64> {
        let mut acc: HashMap<DocId, f64> = HashMap::new();
        for t in distinct(query_tokens) {
            let Some(list) = self.postings.get(t) else {
                continue;
            };
            let w_idf = idf(self.doc_count, list.len());
            for &(doc, tf) in list {
                let len = f64::from(self.doc_length[&doc]);
                *acc.entry(doc).or_insert(0.0) +=
                    w_idf * term_weight(f64::from(tf), len, self.avg_doc_length, params);
            }
        }
        acc
    }
}

/// BM25 score of `query_tokens` against one document of `index`.
pub fn score_field(
    index: &FieldIndex,
    query_tokens: &[String],
    doc_id: DocId,
    params: Bm25Params,
) -> Result<f64, SimilarityError> {
    let len = *index.doc_length.get(&doc_id).ok_or(SimilarityError::UnknownDoc(doc_id))?;
    let mut score = 0.0;
    for t in distinct(query_tokens) {
        let tf = index.term_freq(t, doc_id);
        if tf == 0 {
            continue;
        }
        score += idf(index.doc_count, index.doc_freq(t))
            * term_weight(f64::from(tf), f64::from(len), index.avg_doc_length, params);
    }
    Ok(score)
}

/// Per-field similarity of one candidate, before averaging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldScore {
    pub key: AttributeKey,
    /// Raw BM25 score against the candidate's field.
    pub raw: f64,
    /// The request text's score against itself.
    pub self_score: f64,
    /// `raw / self_score`, or 0 when the self score is 0.
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub registry_name: String,
    pub similarity: f64,
    pub fields: Vec<FieldScore>,
}

/// Anything that can score a request against named candidates.
pub trait Similarity: Sync {
    fn score_candidates(
        &self,
        request: &SearchRequest,
        candidates: &[&str],
    ) -> Result<Vec<ScoredCandidate>, SimilarityError>;
}

/// Per-trivial-key BM25 indexes over a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Index {
    pub fields: BTreeMap<AttributeKey, FieldIndex>,
    pub params: Bm25Params,
    pub tokenizer: TokenizerConfig,
    doc_names: Vec<String>,
    name_to_doc: HashMap<String, DocId>,
}

/// Text indexed for a value: lists joined by spaces, quantities as
/// `"<number> <unit>"`.
fn index_text(record: &ModelRecord, key: AttributeKey) -> Option<String> {
    let v = record.get(key);
    (!v.is_absent()).then(|| v.render())
}

pub fn build_index(
    records: &[ModelRecord],
    trivial_keys: &[AttributeKey],
    params: Bm25Params,
    tokenizer: TokenizerConfig,
) -> Result<Bm25Index, SimilarityError> {
    if records.is_empty() {
        return Err(SimilarityError::EmptyCorpus);
    }
    params.validate()?;
    if let Some(k) = trivial_keys.iter().find(|k| k.is_special()) {
        return Err(SimilarityError::SpecialKey(*k));
    }
    // Doc ids follow registry-name order, so the index does not depend on
    // input order.
    let mut sorted: Vec<&ModelRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.registry_name.cmp(&b.registry_name));
    let doc_names: Vec<String> = sorted.iter().map(|r| r.registry_name.clone()).collect();

    let keys: BTreeSet<AttributeKey> = trivial_keys.iter().copied().collect();
    let mut fields = BTreeMap::new();
    for key in keys {
        let docs = sorted.iter().enumerate().filter_map(|(i, r)| {
            index_text(r, key).map(|text| (i as DocId, tokenizer.tokenize(&text)))
        });
        fields.insert(key, FieldIndex::from_docs(docs));
    }
    Ok(Bm25Index::assemble(fields, params, tokenizer, doc_names))
}

/// All trivial keys.
pub fn trivial_keys() -> Vec<AttributeKey> {
    AttributeKey::ALL.into_iter().filter(|k| k.is_trivial()).collect()
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    format: String,
    version: u32,
    tokenizer: String,
    tokenizer_config: TokenizerConfig,
    params: Bm25Params,
    docs: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct FieldLine {
    field: AttributeKey,
    doc_length: Vec<(DocId, u32)>,
    postings: BTreeMap<String, Vec<(DocId, u32)>>,
}

const INDEX_FORMAT: &str = "ptmsel-bm25";
const INDEX_VERSION: u32 = 1;

impl Bm25Index {
    fn assemble(
        fields: BTreeMap<AttributeKey, FieldIndex>,
        params: Bm25Params,
        tokenizer: TokenizerConfig,
        doc_names: Vec<String>,
    ) -> Self {
        let name_to_doc = doc_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as DocId))
            .collect();
        Bm25Index {
            fields,
            params,
            tokenizer,
            doc_names,
            name_to_doc,
        }
    }

    pub fn doc_id(&self, registry_name: &str) -> Option<DocId> {
        self.name_to_doc.get(registry_name).copied()
    }

    pub fn doc_name(&self, doc: DocId) -> Option<&str> {
        self.doc_names.get(doc as usize).map(String::as_str)
    }

    pub fn doc_names(&self) -> &[String] {
        &self.doc_names
    }

    fn request_queries(&self, request: &SearchRequest) -> Result<Vec<(AttributeKey, Vec<String>)>, SimilarityError> {
        let queries: Vec<(AttributeKey, Vec<String>)> = request
            .present_keys()
            .filter(|k| k.is_trivial())
            .map(|k| (k, self.tokenizer.tokenize(&request.get(k).render())))
            .collect();
        if queries.is_empty() {
            return Err(SimilarityError::NoTrivialFields);
        }
        Ok(queries)
    }

    /// Per-field scores of one indexed document.
    pub fn field_scores(&self, request: &SearchRequest, doc_id: DocId) -> Result<Vec<FieldScore>, SimilarityError> {
        if doc_id as usize >= self.doc_names.len() {
            return Err(SimilarityError::UnknownDoc(doc_id));
        }
        let queries = self.request_queries(request)?;
        Ok(queries
            .iter()
            .map(|(key, q)| {
                let (raw, self_score) = match self.fields.get(key) {
                    Some(field) => {
                        let raw = if field.contains(doc_id) {
                            score_field(field, q, doc_id, self.params).unwrap_or(0.0)
                        } else {
                            0.0
                        };
                        (raw, field.self_score(q, self.params))
                    }
                    None => (0.0, 0.0),
                };
                FieldScore {
                    key: *key,
                    raw,
                    self_score,
                    normalized: normalize(raw, self_score),
                }
            })
            .collect())
    }

    /// Mean of the normalized per-field scores, clamped to [0, 1].
    pub fn request_similarity(&self, request: &SearchRequest, doc_id: DocId) -> Result<f64, SimilarityError> {
        Ok(aggregate(&self.field_scores(request, doc_id)?))
    }

    /// Scores every name in `candidates`. Names missing from the index score 0.
    pub fn score_all(&self, request: &SearchRequest, candidates: &[&str]) -> Result<Vec<ScoredCandidate>, SimilarityError> {
        let queries = self.request_queries(request)?;
        let per_field: Vec<(AttributeKey, f64, HashMap<DocId, f64>)> = queries
            .iter()
            .map(|(key, q)| match self.fields.get(key) {
                Some(field) => (*key, field.self_score(q, self.params), field.score_postings(q, self.params)),
                None => (*key, 0.0, HashMap::new()),
            })
            .collect();
        Ok(candidates
            .iter()
            .map(|name| {
                let doc = self.doc_id(name);
                let fields: Vec<FieldScore> = per_field
                    .iter()
                    .map(|(key, self_score, raw_by_doc)| {
                        let raw = doc.and_then(|d| raw_by_doc.get(&d).copied()).unwrap_or(0.0);
                        FieldScore {
                            key: *key,
                            raw,
                            self_score: *self_score,
                            normalized: normalize(raw, *self_score),
                        }
                    })
                    .collect();
                ScoredCandidate {
                    registry_name: name.to_string(),
                    similarity: aggregate(&fields),
                    fields,
                }
            })
            .collect())
    }

    /// Candidates sorted by descending similarity, ties by ascending name.
    pub fn rank(&self, request: &SearchRequest, records: &[ModelRecord]) -> Result<Vec<(String, f64)>, SimilarityError> {
        let names: Vec<&str> = records.iter().map(|r| r.registry_name.as_str()).collect();
        let mut scored: Vec<(String, f64)> = self
            .score_all(request, &names)?
            .into_iter()
            .map(|c| (c.registry_name, c.similarity))
            .collect();
        sort_ranked(&mut scored);
        Ok(scored)
    }

    pub fn save(&self, path: &Path) -> Result<(), SimilarityError> {
        let io = |source| SimilarityError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
        let header = IndexHeader {
            format: INDEX_FORMAT.into(),
            version: INDEX_VERSION,
            tokenizer: self.tokenizer.version(),
            tokenizer_config: self.tokenizer,
            params: self.params,
            docs: self.doc_names.clone(),
        };
        writeln!(w, "{}", json_line(&header)).map_err(io)?;
        for (key, field) in &self.fields {
            let line = FieldLine {
                field: *key,
                doc_length: field.doc_length.iter().map(|(d, l)| (*d, *l)).collect(),
                postings: field.postings.clone(),
            };
            writeln!(w, "{}", json_line(&line)).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Loads an index, rejecting files whose format or tokenizer version
    /// differs from this build.
    pub fn load(path: &Path) -> Result<Self, SimilarityError> {
        let io = |source| SimilarityError::Io {
            path: path.to_path_buf(),
            source,
        };
        let bad = |reason: String| SimilarityError::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut lines = BufReader::new(fs::File::open(path).map_err(io)?).lines();
        let first = lines.next().ok_or_else(|| bad("empty file".into()))?.map_err(io)?;
        let header: IndexHeader = serde_json::from_str(&first).map_err(|e| bad(e.to_string()))?;
        if header.format != INDEX_FORMAT || header.version != INDEX_VERSION {
            return Err(SimilarityError::VersionMismatch {
                expected: format!("{INDEX_FORMAT} v{INDEX_VERSION}"),
                found: format!("{} v{}", header.format, header.version),
            });
        }
        if header.tokenizer != header.tokenizer_config.version() {
            return Err(SimilarityError::VersionMismatch {
                expected: header.tokenizer_config.version(),
                found: header.tokenizer,
            });
        }
        header.params.validate()?;
        let mut fields = BTreeMap::new();
        for line in lines {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let f: FieldLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            if f.field.is_special() {
                return Err(SimilarityError::SpecialKey(f.field));
            }
            let mut field = FieldIndex {
                postings: f.postings,
                doc_length: f.doc_length.into_iter().collect(),
                avg_doc_length: 0.0,
                doc_count: 0,
            };
            field.refresh_stats();
            let n = header.docs.len() as DocId;
            let dangling = field
                .postings
                .values()
                .flatten()
                .any(|(d, _)| !field.doc_length.contains_key(d) || *d >= n);
            if dangling {
                return Err(bad(format!("postings of `{}` reference unknown documents", f.field)));
            }
            fields.insert(f.field, field);
        }
        Ok(Bm25Index::assemble(fields, header.params, header.tokenizer_config, header.docs))
    }

    /// Like [`Bm25Index::load`], and also requires the given parameters and
    /// tokenizer.
    pub fn load_expecting(path: &Path, params: Bm25Params, tokenizer: TokenizerConfig) -> Result<Self, SimilarityError> {
        let index = Self::load(path)?;
        if index.tokenizer != tokenizer {
            return Err(SimilarityError::VersionMismatch {
                expected: tokenizer.version(),
                found: index.tokenizer.version(),
            });
        }
        if index.params != params {
            return Err(SimilarityError::VersionMismatch {
                expected: format!("k1={} b={}", params.k1, params.b),
                found: format!("k1={} b={}", index.params.k1, index.params.b),
            });
        }
        Ok(index)
    }
}

fn json_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("index lines serialize")
}

impl Similarity for Bm25Index {
    fn score_candidates(&self, request: &SearchRequest, candidates: &[&str]) -> Result<Vec<ScoredCandidate>, SimilarityError> {
        self.score_all(request, candidates)
    }
}

fn normalize(raw: f64, self_score: f64) -> f64 {
    if self_score > 0.0 {
        raw / self_score
    } else {
        0.0
    }
}

fn aggregate(fields: &[FieldScore]) -> f64 {
    if fields.is_empty() {
        return 0.0;
    }
    let mean = fields.iter().map(|f| f.normalized).sum::<f64>() / fields.len() as f64;
    mean.clamp(0.0, 1.0)
}

/// Descending score, then ascending name.
pub fn sort_ranked(items: &mut [(String, f64)]) {
    items.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}
