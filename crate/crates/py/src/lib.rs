//! Python bindings: corpus loading, indexing, search, license checks,
//! request synthesis and evaluation.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ptmsel::card::{load_corpus, parse_card, store_corpus, FrontValue};
use ptmsel::constraints::{license_compatible, normalize_license, ConstraintPolicy, SpecialChecker, UnknownHandling};
use ptmsel::evaluation::{run_benchmark, DeterministicJudge, EvalConfig};
use ptmsel::extraction::ExtractionConfig;
use ptmsel::metadata;
use ptmsel::pipeline::{extract_corpus, ingest};
use ptmsel::selection::{self, SelectionConfig};
use ptmsel::similarity::{self, build_index, trivial_keys, Bm25Index, Bm25Params, TokenizerConfig};
use ptmsel::synthesis::{synthesize_corpus, SynthesisConfig};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde_json::Value;

create_exception!(pyptmsel, PtmselError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    PtmselError::new_err(e.to_string())
}

fn json_to_py<'py>(py: Python<'py>, value: &Value) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (value.to_string(),))
}

/// A model and its template attributes.
#[pyclass(module = "pyptmsel", name = "ModelRecord", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModelRecord {
    inner: metadata::ModelRecord,
}

#[pymethods]
impl PyModelRecord {
    #[getter]
    fn registry_name(&self) -> &str {
        &self.inner.registry_name
    }

    /// Rendered value of an attribute, or None when absent.
    fn get(&self, key: &str) -> PyResult<Option<String>> {
        let key: metadata::AttributeKey = key.parse().map_err(|e: metadata::MetadataError| PyValueError::new_err(e.to_string()))?;
        let value = self.inner.get(key);
        Ok((!value.is_absent()).then(|| value.render()))
    }

    fn keys(&self) -> Vec<&'static str> {
        self.inner.present_keys().map(|k| k.as_str()).collect()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.inner.to_json())
    }

    fn __repr__(&self) -> String {
        format!("ModelRecord({:?}, {} attributes)", self.inner.registry_name, self.inner.present_keys().count())
    }
}

/// A search request: template attribute values keyed by attribute name.
#[pyclass(module = "pyptmsel", name = "SearchRequest", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySearchRequest {
    inner: metadata::SearchRequest,
}

#[pymethods]
impl PySearchRequest {
    #[new]
    #[pyo3(signature = (attributes, request_id = "request"))]
    fn new(py: Python<'_>, attributes: &Bound<'_, PyDict>, request_id: &str) -> PyResult<Self> {
        let text: String = py.import("json")?.call_method1("dumps", (attributes,))?.extract()?;
        let attrs: Value = serde_json::from_str(&text).map_err(err)?;
        let value = serde_json::json!({"request_id": request_id, "attributes": attrs});
        Self::from_value(&value)
    }

    /// Parses a request object in the file/API encoding.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Self::from_value(&value)
    }

    #[getter]
    fn request_id(&self) -> &str {
        &self.inner.request_id
    }

    fn get(&self, key: &str) -> PyResult<Option<String>> {
        let key: metadata::AttributeKey = key.parse().map_err(|e: metadata::MetadataError| PyValueError::new_err(e.to_string()))?;
        let value = self.inner.get(key);
        Ok((!value.is_absent()).then(|| value.render()))
    }

    fn to_json(&self) -> String {
        self.inner.to_line()
    }

    fn __repr__(&self) -> String {
        format!("SearchRequest({:?})", self.inner.request_id)
    }
}

impl PySearchRequest {
    fn from_value(value: &Value) -> PyResult<Self> {
        let inner = metadata::SearchRequest::from_json(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PySearchRequest { inner })
    }
}

/// A list of model records.
#[pyclass(module = "pyptmsel", name = "Corpus", frozen)]
struct PyCorpus {
    records: Vec<metadata::ModelRecord>,
    stats: Option<String>,
}

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCorpus {
            records: load_corpus(&path).map_err(err)?,
            stats: None,
        })
    }

    /// Ingests a card directory and fills attributes with the offline
    /// heuristic extractor.
    #[staticmethod]
    #[pyo3(signature = (cards_dir, listings = None))]
    fn from_cards(cards_dir: PathBuf, listings: Option<PathBuf>) -> PyResult<Self> {
        let out = ingest(&cards_dir, listings.as_deref()).map_err(err)?;
        let records = extract_corpus(&out.records, &out.cards, None, &ExtractionConfig::default(), 4).map_err(err)?;
        Ok(PyCorpus {
            records,
            stats: Some(out.stats.to_string()),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        store_corpus(&self.records, &path).map_err(err)
    }

    /// Ingest statistics, when built from cards.
    #[getter]
    fn stats(&self) -> Option<String> {
        self.stats.clone()
    }

    fn names(&self) -> Vec<String> {
        self.records.iter().map(|r| r.registry_name.clone()).collect()
    }

    fn get(&self, name: &str) -> Option<PyModelRecord> {
        self.records
            .iter()
            .find(|r| r.registry_name == name)
            .map(|r| PyModelRecord { inner: r.clone() })
    }

    fn __len__(&self) -> usize {
        self.records.len()
    }
}

/// BM25 index over a corpus's trivial attributes.
#[pyclass(module = "pyptmsel", name = "Index", frozen)]
struct PyIndex {
    inner: Bm25Index,
}

#[pymethods]
impl PyIndex {
    #[staticmethod]
    #[pyo3(signature = (corpus, k1 = 1.2, b = 0.75))]
    fn build(corpus: &PyCorpus, k1: f64, b: f64) -> PyResult<Self> {
        let params = Bm25Params { k1, b };
        let inner = build_index(&corpus.records, &trivial_keys(), params, TokenizerConfig::default()).map_err(err)?;
        Ok(PyIndex { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyIndex {
            inner: Bm25Index::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    /// Every record with its similarity, best first.
    fn rank(&self, request: &PySearchRequest, corpus: &PyCorpus) -> PyResult<Vec<(String, f64)>> {
        self.inner.rank(&request.inner, &corpus.records).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.doc_names().len()
    }
}

/// One selected model.
#[pyclass(module = "pyptmsel", name = "RankedMatch", frozen)]
struct PyRankedMatch {
    inner: selection::RankedMatch,
}

#[pymethods]
impl PyRankedMatch {
    #[getter]
    fn registry_name(&self) -> &str {
        &self.inner.registry_name
    }

    #[getter]
    fn similarity(&self) -> f64 {
        self.inner.similarity
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.rank
    }

    /// `(key, outcome, method, rationale)` per special constraint.
    #[getter]
    fn verdicts(&self) -> Vec<(String, String, String, String)> {
        self.inner
            .verdicts
            .iter()
            .map(|v| {
                let method = serde_json::to_value(v.method).ok().and_then(|m| m.as_str().map(String::from)).unwrap_or_default();
                (v.key.to_string(), v.outcome.to_string(), method, v.rationale.clone())
            })
            .collect()
    }

    fn explain(&self) -> String {
        selection::explain(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!("RankedMatch(#{} {:?}, {:.4})", self.inner.rank, self.inner.registry_name, self.inner.similarity)
    }
}

fn policy(unknown: &str) -> PyResult<ConstraintPolicy> {
    let handling: UnknownHandling = serde_json::from_value(Value::String(unknown.into()))
        .map_err(|_| PyValueError::new_err(format!("unknown handling must be one of treat_as_satisfied, treat_as_violated, keep_unknown_and_rank, got {unknown:?}")))?;
    Ok(ConstraintPolicy {
        unknown_handling: handling,
        numeric_tolerance: 0.0,
    })
}

/// Selects the top models for a request with deterministic constraint checks.
#[pyfunction]
#[pyo3(signature = (request, corpus, index, top_k = 10, unknown = "treat_as_satisfied"))]
fn search(
    request: &PySearchRequest,
    corpus: &PyCorpus,
    index: &PyIndex,
    top_k: usize,
    unknown: &str,
) -> PyResult<Vec<PyRankedMatch>> {
    let policy = policy(unknown)?;
    let config = SelectionConfig {
        top_k,
        policy,
        ..Default::default()
    };
    config.validate().map_err(|e| PyValueError::new_err(e.to_string()))?;
    let checker = SpecialChecker::deterministic(policy);
    let matches = selection::select(&request.inner, &corpus.records, &index.inner, &config, &checker).map_err(err)?;
    Ok(matches.into_iter().map(|inner| PyRankedMatch { inner }).collect())
}

/// Outcome of a candidate license against a required one:
/// "satisfied", "violated" or "unknown".
#[pyfunction]
fn check_license(required: &str, candidate: &str) -> String {
    license_compatible(&normalize_license(required), &normalize_license(candidate))
        .outcome
        .to_string()
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    similarity::tokenize(text)
}

/// Splits a card into `(front_matter, body, warning)`.
#[pyfunction]
#[pyo3(signature = (text, registry_name = "card"))]
fn split_card(text: &str, registry_name: &str) -> (BTreeMap<String, Vec<String>>, String, Option<String>) {
    let card = parse_card(text, registry_name);
    let front = card
        .front_matter
        .iter()
        .map(|(k, v)| {
            let items = match v {
                FrontValue::Scalar(s) => vec![s.clone()],
                FrontValue::List(l) => l.clone(),
            };
            (k.clone(), items)
        })
        .collect();
    (front, card.body, card.warning)
}

/// Offline request synthesis: `n` mutated requests per record.
#[pyfunction]
#[pyo3(signature = (corpus, n = 3, seed = 42))]
fn synthesize(corpus: &PyCorpus, n: usize, seed: u64) -> PyResult<Vec<PySearchRequest>> {
    let config = SynthesisConfig {
        n,
        seed,
        ..Default::default()
    };
    let report = synthesize_corpus(&corpus.records, &config, None).map_err(err)?;
    Ok(report
        .requests
        .into_iter()
        .map(|r| PySearchRequest { inner: r.request })
        .collect())
}

/// Runs requests through selection and returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (requests, corpus, index, top_k = 10))]
fn evaluate<'py>(
    py: Python<'py>,
    requests: Vec<PyRef<'py, PySearchRequest>>,
    corpus: &PyCorpus,
    index: &PyIndex,
    top_k: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let requests: Vec<metadata::SearchRequest> = requests.iter().map(|r| r.inner.clone()).collect();
    let config = EvalConfig {
        selection: SelectionConfig {
            top_k,
            ..Default::default()
        },
        ..Default::default()
    };
    let report = run_benchmark(
        &requests,
        &corpus.records,
        &index.inner,
        &config,
        &SpecialChecker::default(),
        &DeterministicJudge::default(),
    )
    .map_err(err)?;
    let value: Value = serde_json::from_str(&report.to_json_string()).map_err(err)?;
    json_to_py(py, &value)
}

#[pymodule]
fn pyptmsel(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PtmselError", m.py().get_type::<PtmselError>())?;
    m.add_class::<PyModelRecord>()?;
    m.add_class::<PySearchRequest>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyIndex>()?;
    m.add_class::<PyRankedMatch>()?;
    m.add_function(wrap_pyfunction!(search, m)?)?;
    m.add_function(wrap_pyfunction!(check_license, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(split_card, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
