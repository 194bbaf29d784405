//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ptmsel::card::{corpus_stats, load_corpus, load_listings, lower_median, parse_card};
use ptmsel::constraints::{
    license_compatible, license_matrix, normalize_license, ConstraintChecker, ConstraintPolicy, Outcome, SpecialChecker,
    UnknownHandling, BUNDLED_LICENSES,
};
use ptmsel::evaluation::{run_benchmark, DeterministicJudge, EvalConfig, SatisfactionLabel};
use ptmsel::extraction::ExtractionConfig;
use ptmsel::metadata::{AttributeKey, AttributeValue, Extractor, ModelRecord, Provenance, SearchRequest, Source};
use ptmsel::pipeline::{ingest, run_evaluate, run_extract, run_index, run_synthesize, write_ingest};
use ptmsel::selection::{select, SelectionConfig};
use ptmsel::similarity::{build_index, score_field, trivial_keys, Bm25Params, FieldIndex, TokenizerConfig};
use ptmsel::synthesis::{
    project_request, synthesize_corpus, StrategySpec, SynthesisConfig,
};
use ptmsel::vocab::ValueSets;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn prov() -> Provenance {
    Provenance::new(Source::CardExtracted, Extractor::Manual)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Brute-force BM25 over plain strings, sharing no code with the library
/// index.
mod oracle {
    use std::collections::BTreeMap;

    pub const K1: f64 = 1.2;
    pub const B: f64 = 0.75;

    pub fn tokens(text: &str) -> Vec<String> {
        let lower = text.to_lowercase();
        let mut out = Vec::new();
        let mut cur = String::new();
        for c in lower.chars() {
            if c.is_alphanumeric() {
                cur.push(c);
            } else {
                if cur.chars().count() >= 2 {
                    out.push(cur.clone());
                }
                cur.clear();
            }
        }
        if cur.chars().count() >= 2 {
            out.push(cur);
        }
        out
    }

    fn weight(tf: f64, len: f64, avg: f64) -> f64 {
        tf * (K1 + 1.0) / (tf + K1 * (1.0 - B + B * len / avg))
    }

    /// `docs[i]` is the text of document i for one field, or None.
    pub fn field_scores(docs: &[Option<String>], query: &str) -> Vec<f64> {
        let toks: Vec<Option<Vec<String>>> = docs
            .iter()
            .map(|d| d.as_ref().map(|t| tokens(t)).filter(|t| !t.is_empty()))
            .collect();
        let n = toks.iter().filter(|t| t.is_some()).count();
        let q = tokens(query);
        let mut distinct: Vec<&String> = q.iter().collect();
        distinct.sort();
        distinct.dedup();
        if n == 0 {
            return vec![f64::NAN; docs.len() + 1];
        }
        let total: usize = toks.iter().flatten().map(Vec::len).sum();
        let avg = total as f64 / n as f64;
        let idf = |t: &String| {
            let df = toks.iter().flatten().filter(|d| d.contains(t)).count() as f64;
            ((n as f64 - df + 0.5) / (df + 0.5) + 1.0).ln()
        };
        let mut out: Vec<f64> = toks
            .iter()
            .map(|d| match d {
                None => 0.0,
                Some(d) => {
                    let mut s = 0.0;
                    for t in &distinct {
                        let tf = d.iter().filter(|x| x == t).count() as f64;
                        if tf > 0.0 {
                            s += idf(t) * weight(tf, d.len() as f64, avg);
                        }
                    }
                    s
                }
            })
            .collect();
        let mut self_score = 0.0;
        for t in &distinct {
            let tf = q.iter().filter(|x| x == t).count() as f64;
            self_score += idf(t) * weight(tf, q.len() as f64, avg);
        }
        out.push(self_score);
        out
    }

    /// Mean normalized per-field score for each record, clamped to [0, 1].
    pub fn similarities(records: &[BTreeMap<String, String>], request: &BTreeMap<String, String>) -> Vec<f64> {
        let mut sums = vec![0.0; records.len()];
        for (field, query) in request {
            let docs: Vec<Option<String>> = records.iter().map(|r| r.get(field).cloned()).collect();
            let scores = field_scores(&docs, query);
            let self_score = scores[records.len()];
            for (i, s) in sums.iter_mut().enumerate() {
                if self_score > 0.0 {
                    *s += scores[i] / self_score;
                }
            }
        }
        sums.into_iter()
            .map(|s| (s / request.len() as f64).clamp(0.0, 1.0))
            .collect()
    }
}

const VOCAB: [&str; 24] = [
    "image", "text", "audio", "video", "detection", "segmentation", "classification", "translation", "english",
    "german", "speech", "summary", "tabular", "bird", "car", "street", "medical", "legal", "code", "python",
    "fast", "small", "large", "vision",
];

fn random_text(rng: &mut ChaCha8Rng, max_words: u32) -> String {
    let n = rng.gen_range(1..=max_words);
    (0..n)
        .map(|_| {
            if rng.gen_range(0..20u32) == 0 {
                "x" // dropped by the tokenizer
            } else {
                VOCAB[rng.gen_range(0..VOCAB.len() as u32) as usize]
            }
        })
        .collect::<Vec<_>>()
        .join(if rng.gen_bool(0.5) { " " } else { ", " })
}

fn criterion_1() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let keys = trivial_keys();
    let mut max_diff: f64 = 0.0;
    let mut scored = 0usize;
    for corpus_no in 0..200 {
        let n_docs = rng.gen_range(1..=50u32) as usize;
        let n_fields = rng.gen_range(1..=8u32) as usize;
        let mut fields: Vec<AttributeKey> = Vec::new();
        while fields.len() < n_fields {
            let k = keys[rng.gen_range(0..keys.len() as u32) as usize];
            if !fields.contains(&k) {
                fields.push(k);
            }
        }
        let mut plain: Vec<BTreeMap<String, String>> = Vec::new();
        let mut records = Vec::new();
        for d in 0..n_docs {
            let mut r = ModelRecord::new(format!("doc{d:03}"), "x");
            let mut p = BTreeMap::new();
            for &k in &fields {
                if rng.gen_range(0..4u32) == 0 {
                    continue;
                }
                let text = random_text(&mut rng, 12);
                r = r.with(k, AttributeValue::text(text.clone()), prov());
                p.insert(k.as_str().to_string(), text);
            }
            records.push(r);
            plain.push(p);
        }
        let index = build_index(&records, &keys, Bm25Params::default(), TokenizerConfig::default()).map_err(|e| e.to_string())?;
        for q in 0..50 {
            let n_q = rng.gen_range(1..=fields.len().min(3) as u32) as usize;
            let mut req = SearchRequest::new(format!("q{q}"));
            let mut plain_req = BTreeMap::new();
            for &k in fields.iter().take(n_q) {
                let text = random_text(&mut rng, 6);
                req = req.with(k, AttributeValue::text(text.clone()));
                plain_req.insert(k.as_str().to_string(), text);
            }
            let ranked = index.rank(&req, &records).map_err(|e| e.to_string())?;
            let sims = oracle::similarities(&plain, &plain_req);
            let mut expected: Vec<(String, f64)> =
                records.iter().map(|r| r.registry_name.clone()).zip(sims).collect();
            expected.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            for (got, want) in ranked.iter().zip(&expected) {
                ensure(got.0 == want.0, || format!("corpus {corpus_no} query {q}: order differs at {} vs {}", got.0, want.0))?;
                let d = (got.1 - want.1).abs();
                max_diff = max_diff.max(d);
                ensure(d <= 1e-9, || format!("corpus {corpus_no} query {q}: {} scored {} vs oracle {}", got.0, got.1, want.1))?;
                scored += 1;
            }
            ensure(ranked.len() == expected.len(), || "length differs".into())?;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("200 corpora x 50 queries, {scored} scores, max |diff| {max_diff:.1e}, {secs:.1}s"))
}

fn criterion_2() -> Result<String, String> {
    let field = FieldIndex::from_docs([(0, vec!["vision".to_string()])]);
    let score = score_field(&field, &["vision".to_string()], 0, Bm25Params { k1: 1.2, b: 0.75 }).map_err(|e| e.to_string())?;
    // N = 1, df = 1: idf = ln((1 - 1 + 0.5) / (1 + 0.5) + 1) = ln(4/3).
    // tf = 1, len = avglen: (1 * 2.2) / (1 + 1.2 * 1) = 1.
    let (n, df, tf, len_ratio, k1) = (1.0f64, 1.0f64, 1.0f64, 1.0f64, 1.2f64);
    let closed_form = ((n - df + 0.5) / (df + 0.5) + 1.0).ln() * ((tf * (k1 + 1.0)) / (tf + k1 * len_ratio));
    ensure((score - closed_form).abs() < 1e-12, || format!("score {score} vs closed form {closed_form}"))?;
    ensure((closed_form - (4.0f64 / 3.0).ln()).abs() < 1e-15, || "closed form is not ln(4/3)".into())?;
    let literal = (5.0f64 / 3.0).ln();
    Ok(format!(
        "score {score:.6} equals the evaluated closed form ln(4/3) x 1.0; ln(5/3) = {literal:.4} would need (N-df+0.5) = 1, which N=1, df=1 does not give"
    ))
}

fn fixture_corpus(dir: &Path) -> Result<Vec<ModelRecord>, String> {
    let out = ingest(&fixtures().join("cards"), Some(&fixtures().join("listings.jsonl"))).map_err(|e| e.to_string())?;
    let corpus = dir.join("corpus.jsonl");
    write_ingest(&out, &corpus).map_err(|e| e.to_string())?;
    run_extract(&corpus, &dir.join("extracted.jsonl"), None, &ExtractionConfig::default(), 4).map_err(|e| e.to_string())
}

fn criterion_3() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let records = fixture_corpus(dir.path())?;
    ensure(records.len() == 20, || format!("fixture corpus has {} records", records.len()))?;
    let index = build_index(&records, &trivial_keys(), Bm25Params::default(), TokenizerConfig::default()).map_err(|e| e.to_string())?;
    let requests: Vec<SearchRequest> = records.iter().map(|r| project_request(r, r.registry_name.clone())).collect();
    let report = run_benchmark(
        &requests,
        &records,
        &index,
        &EvalConfig::default(),
        &SpecialChecker::default(),
        &DeterministicJudge::default(),
    )
    .map_err(|e| e.to_string())?;
    let mut hits = 0;
    for row in &report.rows {
        let top = row.candidates.first().ok_or_else(|| format!("{}: no candidates", row.request_id))?;
        // Oracle view: the origin must have the maximal brute-force similarity.
        let plain: Vec<BTreeMap<String, String>> = records
            .iter()
            .map(|r| BTreeMap::from([("function".to_string(), r.get(AttributeKey::Function).render())]))
            .collect();
        let req = BTreeMap::from([(
            "function".to_string(),
            records.iter().find(|r| r.registry_name == row.request_id).unwrap().get(AttributeKey::Function).render(),
        )]);
        let sims = oracle::similarities(&plain, &req);
        let best = records
            .iter()
            .zip(&sims)
            .max_by(|a, b| a.1.total_cmp(b.1).then_with(|| b.0.registry_name.cmp(&a.0.registry_name)))
            .map(|(r, _)| r.registry_name.clone())
            .unwrap();
        if top.registry_name == row.request_id && top.label == SatisfactionLabel::Full && best == row.request_id {
            hits += 1;
        }
    }
    ensure(hits == 20, || format!("{hits}/20 origins retrieved at rank 1 with a full label"))?;
    ensure(report.aggregate.full_hits[0] == (1, 20), || format!("aggregate {:?}", report.aggregate.full_hits))?;
    Ok("20/20 origins at rank 1, labeled full, oracle agrees".into())
}

fn criterion_4() -> Result<String, String> {
    let snapshot = include_str!("snapshots/license_matrix.txt");
    let now = license_matrix(&BUNDLED_LICENSES);
    ensure(now == snapshot, || format!("matrix differs from snapshot:\n{now}"))?;
    let mit = normalize_license("mit");
    for cand in ["apache-2.0", "bsd-3-clause", "mit"] {
        let v = license_compatible(&mit, &normalize_license(cand));
        ensure(v.outcome == Outcome::Satisfied, || format!("mit vs {cand}: {:?}", v.outcome))?;
    }
    let v = license_compatible(&mit, &normalize_license("gpl-3.0"));
    ensure(v.outcome == Outcome::Violated, || format!("mit vs gpl-3.0: {:?}", v.outcome))?;
    Ok("10x10 matrix matches snapshot; mit accepts apache-2.0/bsd-3-clause/mit, rejects gpl-3.0".into())
}

fn criterion_5() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let records = fixture_corpus(dir.path())?;
    let report = synthesize_corpus(&records, &SynthesisConfig::default(), None).map_err(|e| e.to_string())?;
    ensure(report.shortfalls.is_empty(), || format!("unexpected shortfalls {:?}", report.shortfalls))?;
    ensure(report.requests.len() == 3 * records.len(), || format!("{} requests for {} records", report.requests.len(), records.len()))?;

    // Full-size count on a synthetic corpus of 5,069 records.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let licenses = ["mit", "apache-2.0", "gpl-3.0", "cc-by-4.0"];
    let big: Vec<ModelRecord> = (0..5069)
        .map(|i| {
            ModelRecord::new(format!("m{i:05}"), "x")
                .with(AttributeKey::Function, AttributeValue::text(format!("{} model", random_text(&mut rng, 8))), prov())
                .with(AttributeKey::License, AttributeValue::token(licenses[i % 4]), prov())
        })
        .collect();
    let big_report = synthesize_corpus(&big, &SynthesisConfig::default(), None).map_err(|e| e.to_string())?;
    let produced = big_report.requests.len();
    let deficit: usize = big_report.shortfalls.iter().map(|s| s.wanted - s.produced).sum();
    ensure(produced + deficit == 15_207, || format!("{produced} produced + {deficit} itemized shortfall != 15207"))?;
    ensure(deficit == 0, || format!("{} records short", big_report.shortfalls.len()))?;

    // Shortfalls are itemized, never silent.
    let single = SynthesisConfig {
        n: 3,
        strategies: vec![StrategySpec::closed(AttributeKey::License)],
        value_sets: ValueSets::default().with_set(AttributeKey::License, vec!["mit".into(), "apache-2.0".into()]),
        ..Default::default()
    };
    let short = synthesize_corpus(&records, &single, None).map_err(|e| e.to_string())?;
    let deficit: usize = short.shortfalls.iter().map(|s| s.wanted - s.produced).sum();
    ensure(short.requests.len() + deficit == 3 * records.len(), || "shortfall accounting does not add up".into())?;
    ensure(!short.shortfalls.is_empty() && short.shortfalls.iter().all(|s| !s.reasons.is_empty() || s.produced > 0), || {
        "shortfalls missing".into()
    })?;
    Ok(format!(
        "n=3: {} requests for {} records; 5069 records -> {produced}; constrained run itemizes {} shortfalls",
        report.requests.len(),
        records.len(),
        short.shortfalls.len()
    ))
}

fn pipeline_run(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let e = |x: ptmsel::pipeline::PipelineError| x.to_string();
    let out = ingest(&fixtures().join("cards"), Some(&fixtures().join("listings.jsonl"))).map_err(e)?;
    let corpus = dir.join("corpus.jsonl");
    write_ingest(&out, &corpus).map_err(e)?;
    let extracted = dir.join("extracted.jsonl");
    run_extract(&corpus, &extracted, None, &ExtractionConfig::default(), 4).map_err(e)?;
    let index = dir.join("index.jsonl");
    run_index(&extracted, &index, Bm25Params::default(), TokenizerConfig::default()).map_err(e)?;
    let requests = dir.join("requests.jsonl");
    let cfg = SynthesisConfig {
        seed: 42,
        ..Default::default()
    };
    run_synthesize(&extracted, &requests, &cfg, None).map_err(e)?;
    let report = dir.join("report.json");
    run_evaluate(
        &index,
        &extracted,
        &requests,
        &report,
        &EvalConfig::default(),
        &SpecialChecker::default(),
        &DeterministicJudge::default(),
    )
    .map_err(e)?;
    ["corpus.jsonl", "extracted.jsonl", "index.jsonl", "requests.jsonl", "report.json"]
        .iter()
        .map(|f| std::fs::read(dir.join(f)).map(|b| (f.to_string(), b)).map_err(|x| x.to_string()))
        .collect()
}

fn criterion_6() -> Result<String, String> {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = pipeline_run(a.path())?;
    let second = pipeline_run(b.path())?;
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        ensure(!x.is_empty(), || format!("{name} is empty"))?;
        ensure(x == y, || format!("{name} differs between runs"))?;
    }
    let sizes: Vec<String> = first.iter().map(|(n, b)| format!("{n}={}B", b.len())).collect();
    Ok(format!("byte-identical: {}", sizes.join(" ")))
}

fn criterion_7() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let licenses = ["mit", "apache-2.0", "gpl-3.0", "cc-by-nc-4.0", "lgpl-3.0", "unknown", "proprietary"];
    let handlings = [UnknownHandling::TreatAsSatisfied, UnknownHandling::TreatAsViolated, UnknownHandling::KeepUnknownAndRank];
    let mut violated_top = 0;
    for f in 0..500 {
        let n = rng.gen_range(1..=30u32) as usize;
        let corpus: Vec<ModelRecord> = (0..n)
            .map(|i| {
                let mut r = ModelRecord::new(format!("c{i:02}"), "x")
                    .with(AttributeKey::Function, AttributeValue::text(random_text(&mut rng, 8)), prov())
                    .with(AttributeKey::License, AttributeValue::token(licenses[rng.gen_range(0..licenses.len() as u32) as usize]), prov());
                if rng.gen_bool(0.7) {
                    let gb = rng.gen_range(1..=8u32) as f64;
                    r = r.with(AttributeKey::ModelSize, AttributeValue::quantity(gb * 1e9, "bytes"), prov());
                }
                r
            })
            .collect();
        let mut req = SearchRequest::new(format!("f{f}"))
            .with(AttributeKey::Function, AttributeValue::text(random_text(&mut rng, 4)));
        if rng.gen_bool(0.8) {
            req = req.with(AttributeKey::License, AttributeValue::token(["mit", "gpl-3.0", "cc-by-nc-4.0"][rng.gen_range(0..3u32) as usize]));
        }
        if rng.gen_bool(0.5) {
            req = req.with(AttributeKey::ModelSize, AttributeValue::text(format!("<= {} GB", rng.gen_range(1..=8u32))));
        }
        let policy = ConstraintPolicy {
            unknown_handling: handlings[rng.gen_range(0..3u32) as usize],
            numeric_tolerance: 0.0,
        };
        let checker = SpecialChecker::deterministic(policy);
        let index = build_index(&corpus, &trivial_keys(), Bm25Params::default(), TokenizerConfig::default()).map_err(|e| e.to_string())?;
        let lazy = SelectionConfig {
            top_k: rng.gen_range(1..=10u32) as usize,
            policy,
            parallelism: rng.gen_range(1..=4u32) as usize,
            ..Default::default()
        };
        let eager = SelectionConfig {
            lazy_constraint_checking: false,
            ..lazy
        };
        let a = select(&req, &corpus, &index, &lazy, &checker).map_err(|e| e.to_string())?;
        let b = select(&req, &corpus, &index, &eager, &checker).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("fixture {f}: lazy and eager differ"))?;
        let returned: BTreeSet<&str> = a.iter().map(|m| m.registry_name.as_str()).collect();
        let ranked = index.rank(&req, &corpus).map_err(|e| e.to_string())?;
        for (pos, (name, _)) in ranked.iter().enumerate() {
            let rec = corpus.iter().find(|r| &r.registry_name == name).unwrap();
            let verdicts = checker.check_all(&req, rec).map_err(|e| e.to_string())?;
            if verdicts.iter().any(|v| v.outcome == Outcome::Violated) {
                ensure(!returned.contains(name.as_str()), || format!("fixture {f}: violated {name} returned"))?;
                if pos == 0 {
                    violated_top += 1;
                }
            }
        }
    }
    ensure(violated_top > 0, || "no fixture had a violated best candidate".into())?;
    Ok(format!("500 fixtures agree; {violated_top} fixtures had a violated top-similarity candidate, always excluded"))
}

const MALFORMED_YAML: [&str; 12] = [
    "license: [mit",
    "a: b: c",
    "\tfoo: bar",
    "{a: 1",
    "key: 'unterminated",
    "- a\n- b",
    "just a scalar",
    "key: \"bad\\q\"",
    "? [a\n",
    "a:\n  - b\n c: d",
    "&x a: *y",
    "key: value\n  bad: indent",
];

fn random_unicode(rng: &mut ChaCha8Rng) -> String {
    const PIECES: [&str; 16] = ["---", "\n", "...", ":", " ", "- ", "[", "]", "{", "}", "license", "é", "日本", "\r\n", "\t", "#"];
    let n = rng.gen_range(0..40u32);
    let mut s = String::new();
    for _ in 0..n {
        match rng.gen_range(0..3u32) {
            0 => s.push_str(PIECES[rng.gen_range(0..PIECES.len() as u32) as usize]),
            1 => s.push(char::from_u32(rng.gen_range(0x20..0x7fu32)).unwrap()),
            _ => {
                let c = rng.gen_range(0..0x11_0000u32);
                s.push(char::from_u32(c).unwrap_or('\u{fffd}'));
            }
        }
    }
    s
}

fn criterion_8() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut warned = 0;
    for i in 0..10_000 {
        let input = random_unicode(&mut rng);
        let card = catch_unwind(|| parse_card(&input, "fuzz")).map_err(|_| format!("input {i} panicked: {input:?}"))?;
        ensure(card.reconstruct() == input, || format!("input {i}: reconstruction differs"))?;
        if card.warning.is_some() {
            warned += 1;
        }
    }
    let mut fallbacks = 0;
    for i in 0..1_000 {
        let bad = MALFORMED_YAML[i % MALFORMED_YAML.len()];
        let prefix = if rng.gen_bool(0.5) { "" } else { "pipeline_tag: fill-mask\n" };
        let body = random_unicode(&mut rng).replace("---", "- -");
        let input = format!("---\n{prefix}{bad}\n---\n{body}");
        let card = catch_unwind(|| parse_card(&input, "bad")).map_err(|_| format!("malformed {i} panicked"))?;
        ensure(card.warning.is_some(), || format!("no warning for {input:?}"))?;
        ensure(card.body == input && card.front_matter.is_empty(), || format!("no fallback for {input:?}"))?;
        fallbacks += 1;
    }
    Ok(format!("10000 random inputs parsed without panic ({warned} warned); {fallbacks}/1000 malformed front matters fell back with warning"))
}

fn criterion_9() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let words: Vec<String> = (0..500).map(|i| format!("w{i}")).collect();
    let text = |rng: &mut ChaCha8Rng, n: u32| -> String {
        (0..rng.gen_range(n / 2..=n))
            .map(|_| words[rng.gen_range(0..words.len() as u32) as usize].clone())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let records: Vec<ModelRecord> = (0..1000)
        .map(|i| {
            ModelRecord::new(format!("m{i:04}"), "x")
                .with(AttributeKey::Function, AttributeValue::text(text(&mut rng, 30)), prov())
                .with(AttributeKey::Domain, AttributeValue::text(text(&mut rng, 6)), prov())
                .with(AttributeKey::Task, AttributeValue::text(text(&mut rng, 4)), prov())
                .with(AttributeKey::License, AttributeValue::token(["mit", "gpl-3.0", "apache-2.0"][i % 3]), prov())
        })
        .collect();
    let requests: Vec<SearchRequest> = (0..100)
        .map(|i| {
            SearchRequest::new(format!("r{i}"))
                .with(AttributeKey::Function, AttributeValue::text(text(&mut rng, 10)))
                .with(AttributeKey::Task, AttributeValue::text(text(&mut rng, 2)))
                .with(AttributeKey::License, AttributeValue::token("mit"))
        })
        .collect();
    let start = Instant::now();
    let index = build_index(&records, &trivial_keys(), Bm25Params::default(), TokenizerConfig::default()).map_err(|e| e.to_string())?;
    let checker = SpecialChecker::default();
    let mut returned = 0;
    for r in &requests {
        returned += select(r, &records, &index, &SelectionConfig::default(), &checker).map_err(|e| e.to_string())?.len();
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(returned > 0, || "no results".into())?;
    ensure(secs < 5.0, || format!("took {secs:.2}s"))?;
    Ok(format!("build + 100 searches over 1000 records in {secs:.2}s"))
}

fn criterion_10() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..1000 {
        let n = rng.gen_range(1..=200u32);
        let hi = rng.gen_range(1..=1000u64);
        let values: Vec<u64> = (0..n).map(|_| rng.gen_range(0..=hi)).collect();
        let mut sorted = values.clone();
        sorted.sort_unstable();
        let oracle = sorted[(sorted.len() - 1) / 2];
        ensure(lower_median(&values) == Some(oracle), || format!("multiset {i}: median mismatch"))?;
    }
    ensure(lower_median(&[]).is_none(), || "empty median".into())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let records = fixture_corpus(dir.path())?;
    let listings = load_listings(&fixtures().join("listings.jsonl")).map_err(|e| e.to_string())?;
    let stats = corpus_stats(&records, &listings).map_err(|e| e.to_string())?;
    let median = |f: fn(&ptmsel::card::HubListing) -> Option<u64>| {
        let mut v: Vec<u64> = listings.iter().filter_map(f).collect();
        v.sort_unstable();
        v[(v.len() - 1) / 2]
    };
    let expected = format!(
        "contributors={} commits={} downloads={} likes={}",
        median(|l| l.contributors),
        median(|l| l.commits),
        median(|l| Some(l.downloads)),
        median(|l| Some(l.likes))
    );
    let text = stats.to_string();
    let line = text
        .lines()
        .find(|l| l.starts_with("medians"))
        .ok_or_else(|| format!("no medians line in:\n{text}"))?;
    ensure(line.ends_with(&expected), || format!("`{line}` vs `{expected}`"))?;
    let reloaded = load_corpus(&dir.path().join("extracted.jsonl")).map_err(|e| e.to_string())?;
    ensure(reloaded.len() == 20, || "reload".into())?;
    Ok(format!("1000 multisets match sort oracle; fixture `{line}`"))
}

fn main() {
    let checks: [(&str, Check); 10] = [
        ("BM25 oracle equivalence", criterion_1),
        ("BM25 point check", criterion_2),
        ("self-retrieval on fixture corpus", criterion_3),
        ("license matrix", criterion_4),
        ("dataset arithmetic", criterion_5),
        ("pipeline determinism", criterion_6),
        ("lazy/eager selection semantics", criterion_7),
        ("card parser robustness", criterion_8),
        ("throughput", criterion_9),
        ("corpus stats medians", criterion_10),
    ];
    let only: Option<usize> = std::env::args().nth(1).and_then(|a| a.parse().ok());
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        ran += 1;
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("[PASS] {n:>2} {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {n:>2} {name}: {why}");
            }
        }
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
