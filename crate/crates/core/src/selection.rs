//! Ranking plus constraint filtering: the search procedure itself.
//!
//! Candidates are scored on the request's trivial fields, dropped when at or
//! below the similarity threshold, then checked on the request's special
//! fields in descending-similarity order. A violated check removes the
//! candidate. In lazy mode checking stops once `top_k` candidates have
//! passed, which bounds the number of model calls.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{ConstraintChecker, ConstraintError, ConstraintPolicy, ConstraintVerdict, Outcome, UnknownHandling};
use crate::llm::map_bounded;
use crate::metadata::{ModelRecord, SearchRequest};
use crate::similarity::{FieldScore, ScoredCandidate, Similarity, SimilarityError};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("request has no trivial attribute to rank on")]
    NoTrivialFields,
    #[error("invalid selection config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Similarity(SimilarityError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
}

impl From<SimilarityError> for SelectionError {
    fn from(e: SimilarityError) -> Self {
        match e {
            SimilarityError::NoTrivialFields => SelectionError::NoTrivialFields,
            SimilarityError::EmptyCorpus => SelectionError::EmptyCorpus,
            other => SelectionError::Similarity(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub top_k: usize,
    /// Candidates must score strictly above this.
    pub sim_threshold: f64,
    pub lazy_constraint_checking: bool,
    pub policy: ConstraintPolicy,
    /// Candidates checked concurrently per batch.
    pub parallelism: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            top_k: 10,
            sim_threshold: 0.0,
            lazy_constraint_checking: true,
            policy: ConstraintPolicy::default(),
            parallelism: 4,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), SelectionError> {
        if self.top_k == 0 {
            return Err(SelectionError::InvalidConfig("top_k must be at least 1".into()));
        }
        if self.sim_threshold.is_nan() {
            return Err(SelectionError::InvalidConfig("sim_threshold is NaN".into()));
        }
        if self.parallelism == 0 {
            return Err(SelectionError::InvalidConfig("parallelism must be at least 1".into()));
        }
        self.policy.validate().map_err(SelectionError::InvalidConfig)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedMatch {
    pub registry_name: String,
    pub similarity: f64,
    pub field_scores: Vec<FieldScore>,
    pub verdicts: Vec<ConstraintVerdict>,
    /// 1-based.
    pub rank: usize,
}

impl RankedMatch {
    pub fn has_unknown(&self) -> bool {
        self.verdicts.iter().any(|v| v.outcome == Outcome::Unknown)
    }
}

enum Admission {
    Accept,
    /// Kept, ranked after accepted candidates.
    Deferred,
    Reject,
}

fn admit(verdicts: &[ConstraintVerdict], policy: &ConstraintPolicy) -> Admission {
    if verdicts.iter().any(|v| v.outcome == Outcome::Violated) {
        return Admission::Reject;
    }
    if !verdicts.iter().any(|v| v.outcome == Outcome::Unknown) {
        return Admission::Accept;
    }
    match policy.unknown_handling {
        UnknownHandling::TreatAsSatisfied => Admission::Accept,
        UnknownHandling::TreatAsViolated => Admission::Reject,
        UnknownHandling::KeepUnknownAndRank => Admission::Deferred,
    }
}

fn by_similarity(a: &ScoredCandidate, b: &ScoredCandidate) -> std::cmp::Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then_with(|| a.registry_name.cmp(&b.registry_name))
}

pub fn select(
    request: &SearchRequest,
    corpus: &[ModelRecord],
    index: &dyn Similarity,
    config: &SelectionConfig,
    checker: &dyn ConstraintChecker,
) -> Result<Vec<RankedMatch>, SelectionError> {
    select_excluding(request, corpus, index, config, checker, &BTreeSet::new())
}

/// Like [`select`], skipping candidates named in `exclude`.
pub fn select_excluding(
    request: &SearchRequest,
    corpus: &[ModelRecord],
    index: &dyn Similarity,
    config: &SelectionConfig,
    checker: &dyn ConstraintChecker,
    exclude: &BTreeSet<String>,
) -> Result<Vec<RankedMatch>, SelectionError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(SelectionError::EmptyCorpus);
    }
    let records: std::collections::HashMap<&str, &ModelRecord> =
        corpus.iter().map(|r| (r.registry_name.as_str(), r)).collect();
    let names: Vec<&str> = records
        .keys()
        .copied()
        .filter(|n| !exclude.contains(*n))
        .collect();
    let mut scored = index.score_candidates(request, &names)?;
    scored.retain(|c| c.similarity > config.sim_threshold);
    scored.sort_by(by_similarity);

    let has_special = request.present_keys().any(|k| k.is_special());
    let mut accepted: Vec<(ScoredCandidate, Vec<ConstraintVerdict>)> = Vec::new();
    let mut deferred: Vec<(ScoredCandidate, Vec<ConstraintVerdict>)> = Vec::new();
    let batch = if config.lazy_constraint_checking { config.parallelism } else { scored.len().max(1) };

    let mut iter = scored.into_iter().peekable();
    while iter.peek().is_some() {
        if config.lazy_constraint_checking && accepted.len() >= config.top_k {
            break;
        }
        let chunk: Vec<ScoredCandidate> = iter.by_ref().take(batch).collect();
        let verdicts: Vec<Result<Vec<ConstraintVerdict>, ConstraintError>> = if has_special {
            map_bounded(&chunk, config.parallelism, |c| checker.check_all(request, records[c.registry_name.as_str()]))
        } else {
            chunk.iter().map(|_| Ok(Vec::new())).collect()
        };
        for (cand, v) in chunk.into_iter().zip(verdicts) {
            let v = v?;
            match admit(&v, &config.policy) {
                Admission::Accept => accepted.push((cand, v)),
                Admission::Deferred => deferred.push((cand, v)),
                Admission::Reject => {}
            }
        }
    }

    Ok(accepted
        .into_iter()
        .chain(deferred)
        .take(config.top_k)
        .enumerate()
        .map(|(i, (c, verdicts))| RankedMatch {
            registry_name: c.registry_name,
            similarity: c.similarity,
            field_scores: c.fields,
            verdicts,
            rank: i + 1,
        })
        .collect())
}

/// Per-field contributions and verdict rationales for one match.
pub fn explain(m: &RankedMatch) -> String {
    let mut out = format!("#{} {}  similarity {:.4}\n", m.rank, m.registry_name, m.similarity);
    for f in &m.field_scores {
        let _ = writeln!(
            out,
            "  field {}: {:.4} (bm25 {:.4} / self {:.4})",
            f.key, f.normalized, f.raw, f.self_score
        );
    }
    if m.verdicts.is_empty() {
        out.push_str("  no special constraints\n");
    }
    for v in &m.verdicts {
        let method = serde_json::to_value(v.method)
            .ok()
            .and_then(|x| x.as_str().map(str::to_string))
            .unwrap_or_default();
        let _ = writeln!(out, "  {}: {} [{}] {}", v.key, v.outcome, method, v.rationale);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{Method, SpecialChecker};
    use crate::metadata::{AttributeKey, AttributeValue, Extractor, Provenance, Source};
    use crate::similarity::{build_index, trivial_keys, Bm25Params, TokenizerConfig};
    use proptest::prelude::*;

    fn prov() -> Provenance {
        Provenance::new(Source::CardExtracted, Extractor::Manual)
    }

    fn rec(name: &str, function: &str, license: &str) -> ModelRecord {
        ModelRecord::new(name, "d")
            .with(AttributeKey::Function, AttributeValue::text(function), prov())
            .with(AttributeKey::License, AttributeValue::token(license), prov())
    }

    fn setup(records: &[ModelRecord]) -> crate::similarity::Bm25Index {
        build_index(records, &trivial_keys(), Bm25Params::default(), TokenizerConfig::default()).unwrap()
    }

    fn names(ms: &[RankedMatch]) -> Vec<&str> {
        ms.iter().map(|m| m.registry_name.as_str()).collect()
    }

    #[test]
    fn single_match_ranks_first() {
        let corpus = [
            rec("a", "speech recognition", "mit"),
            rec("b", "object detection in images", "apache-2.0"),
            rec("c", "text summarization", "bsd-3-clause"),
        ];
        let idx = setup(&corpus);
        let req = SearchRequest::new("r")
            .with(AttributeKey::Function, AttributeValue::text("object detection"))
            .with(AttributeKey::License, AttributeValue::token("mit"));
        let out = select(&req, &corpus, &idx, &SelectionConfig::default(), &SpecialChecker::default()).unwrap();
        assert_eq!(names(&out), ["b"]);
        assert_eq!(out[0].rank, 1);
        assert_eq!(out[0].verdicts[0].outcome, Outcome::Satisfied);
    }

    #[test]
    fn violated_license_is_excluded() {
        let corpus = [
            rec("best", "image captioning model", "gpl-3.0"),
            rec("next", "image captioning", "apache-2.0"),
            rec("other", "speech", "mit"),
        ];
        let idx = setup(&corpus);
        let req = SearchRequest::new("r")
            .with(AttributeKey::Function, AttributeValue::text("image captioning model"))
            .with(AttributeKey::License, AttributeValue::token("mit"));
        let out = select(&req, &corpus, &idx, &SelectionConfig::default(), &SpecialChecker::default()).unwrap();
        assert_eq!(names(&out), ["next"]);
    }

    #[test]
    fn threshold_and_errors() {
        let corpus = [rec("a", "x y", "mit")];
        let idx = setup(&corpus);
        let req = SearchRequest::new("r").with(AttributeKey::Function, AttributeValue::text("x y"));
        let cfg = SelectionConfig {
            sim_threshold: 1.1,
            ..Default::default()
        };
        assert!(select(&req, &corpus, &idx, &cfg, &SpecialChecker::default()).unwrap().is_empty());
        let bad = SearchRequest::new("r").with(AttributeKey::License, AttributeValue::token("mit"));
        assert!(matches!(
            select(&bad, &corpus, &idx, &SelectionConfig::default(), &SpecialChecker::default()),
            Err(SelectionError::NoTrivialFields)
        ));
        assert!(matches!(
            select(&req, &[], &idx, &SelectionConfig::default(), &SpecialChecker::default()),
            Err(SelectionError::EmptyCorpus)
        ));
        let zero = SelectionConfig { top_k: 0, ..Default::default() };
        assert!(select(&req, &corpus, &idx, &zero, &SpecialChecker::default()).is_err());
    }

    #[test]
    fn unknown_policies() {
        let corpus = [
            rec("known", "depth estimation", "mit"),
            ModelRecord::new("nolicense", "d").with(AttributeKey::Function, AttributeValue::text("depth estimation model"), prov()),
        ];
        let idx = setup(&corpus);
        let req = SearchRequest::new("r")
            .with(AttributeKey::Function, AttributeValue::text("depth estimation model"))
            .with(AttributeKey::License, AttributeValue::token("mit"));
        let run = |h| {
            let cfg = SelectionConfig {
                policy: ConstraintPolicy { unknown_handling: h, numeric_tolerance: 0.0 },
                ..Default::default()
            };
            let checker = SpecialChecker::deterministic(cfg.policy);
            names(&select(&req, &corpus, &idx, &cfg, &checker).unwrap()).join(",")
        };
        assert_eq!(run(UnknownHandling::TreatAsSatisfied), "nolicense,known");
        assert_eq!(run(UnknownHandling::TreatAsViolated), "known");
        assert_eq!(run(UnknownHandling::KeepUnknownAndRank), "known,nolicense");
    }

    #[test]
    fn exclusion_and_order_invariance() {
        let corpus = vec![
            rec("a", "translation english french", "mit"),
            rec("b", "translation english german", "mit"),
            rec("c", "translation", "mit"),
        ];
        let idx = setup(&corpus);
        let req = SearchRequest::new("r").with(AttributeKey::Function, AttributeValue::text("english french translation"));
        let cfg = SelectionConfig::default();
        let chk = SpecialChecker::default();
        let base = select(&req, &corpus, &idx, &cfg, &chk).unwrap();
        let mut rev = corpus.clone();
        rev.reverse();
        assert_eq!(select(&req, &rev, &setup(&rev), &cfg, &chk).unwrap(), base);
        let ex: BTreeSet<String> = ["a".to_string()].into();
        let out = select_excluding(&req, &corpus, &idx, &cfg, &chk, &ex).unwrap();
        assert!(!names(&out).contains(&"a"));
    }

    #[test]
    fn explain_lines() {
        let m = RankedMatch {
            registry_name: "m".into(),
            similarity: 0.5,
            field_scores: vec![
                FieldScore { key: AttributeKey::Function, raw: 1.0, self_score: 2.0, normalized: 0.5 },
                FieldScore { key: AttributeKey::Task, raw: 0.0, self_score: 1.0, normalized: 0.0 },
            ],
            verdicts: vec![],
            rank: 1,
        };
        let text = explain(&m);
        assert_eq!(text.lines().filter(|l| l.contains("field ")).count(), 2);
        assert!(text.contains("no special constraints"));
        let mut m2 = m.clone();
        m2.verdicts.push(ConstraintVerdict::new(AttributeKey::License, Outcome::Violated, Method::Rule, "gpl-3.0 is strong copyleft"));
        assert!(explain(&m2).contains("gpl-3.0 is strong copyleft"));
        assert!(explain(&m2).contains("[rule]"));
    }

    const FUNCS: [&str; 6] = ["image", "text", "speech", "detection", "translation", "audio"];
    const LICS: [&str; 5] = ["mit", "gpl-3.0", "cc-by-nc-4.0", "unknown", "apache-2.0"];

    fn fixture() -> impl Strategy<Value = (Vec<ModelRecord>, SearchRequest, usize, UnknownHandling)> {
        let record = (prop::collection::vec(0usize..6, 1..5), 0usize..5);
        (
            prop::collection::vec(record, 1..30),
            prop::collection::vec(0usize..6, 1..4),
            0usize..5,
            1usize..6,
            0usize..3,
        )
            .prop_map(|(recs, q, ql, k, h)| {
                let corpus = recs
                    .into_iter()
                    .enumerate()
                    .map(|(i, (words, l))| {
                        let text: Vec<&str> = words.iter().map(|w| FUNCS[*w]).collect();
                        rec(&format!("m{i:02}"), &text.join(" "), LICS[l])
                    })
                    .collect();
                let text: Vec<&str> = q.iter().map(|w| FUNCS[*w]).collect();
                let req = SearchRequest::new("r")
                    .with(AttributeKey::Function, AttributeValue::text(text.join(" ")))
                    .with(AttributeKey::License, AttributeValue::token(LICS[ql]));
                let h = [UnknownHandling::TreatAsSatisfied, UnknownHandling::TreatAsViolated, UnknownHandling::KeepUnknownAndRank][h];
                (corpus, req, k, h)
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn lazy_equals_eager((corpus, req, k, h) in fixture()) {
            let idx = setup(&corpus);
            let policy = ConstraintPolicy { unknown_handling: h, numeric_tolerance: 0.0 };
            let checker = SpecialChecker::deterministic(policy);
            let lazy = SelectionConfig { top_k: k, policy, parallelism: 2, ..Default::default() };
            let eager = SelectionConfig { lazy_constraint_checking: false, ..lazy };
            let a = select(&req, &corpus, &idx, &lazy, &checker).unwrap();
            let b = select(&req, &corpus, &idx, &eager, &checker).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.len() <= k);
            for m in &a {
                prop_assert!(m.verdicts.iter().all(|v| v.outcome != Outcome::Violated));
                prop_assert!(m.similarity > 0.0);
            }
        }
    }
}
