//! HTTP service over a loaded index.
//!
//! | route | |
//! |---|---|
//! | `POST /search` | body is a request object; returns the ranked matches |
//! | `GET /models/{registry_name}` | the corpus record |
//! | `GET /healthz` | load status |
//! | `POST /reload` | reread index and corpus, then swap them in |
//!
//! Search, model lookup and health answer 503 until the first load finishes.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ptmsel::card::load_corpus;
use ptmsel::constraints::SpecialChecker;
use ptmsel::metadata::{ModelRecord, SearchRequest};
use ptmsel::pipeline::{check_index, PipelineError};
use ptmsel::selection::{select, SelectionConfig, SelectionError};
use ptmsel::similarity::{Bm25Index, Bm25Params, TokenizerConfig};
use serde_json::{json, Value};

use crate::CliError;

/// An index and the corpus it was built from. Immutable once built.
pub struct Loaded {
    pub index: Bm25Index,
    pub records: Vec<ModelRecord>,
    by_name: HashMap<String, usize>,
}

impl Loaded {
    pub fn new(index: Bm25Index, records: Vec<ModelRecord>) -> Result<Self, PipelineError> {
        check_index(&index, &records)?;
        let by_name = records.iter().enumerate().map(|(i, r)| (r.registry_name.clone(), i)).collect();
        Ok(Loaded { index, records, by_name })
    }

    pub fn record(&self, name: &str) -> Option<&ModelRecord> {
        self.by_name.get(name).map(|&i| &self.records[i])
    }
}

#[derive(Debug, Clone)]
pub struct IndexSource {
    pub index: PathBuf,
    pub corpus: PathBuf,
    pub params: Bm25Params,
    pub tokenizer: TokenizerConfig,
}

impl IndexSource {
    pub fn load(&self) -> Result<Loaded, PipelineError> {
        let index = Bm25Index::load_expecting(&self.index, self.params, self.tokenizer)?;
        let records = load_corpus(&self.corpus)?;
        Loaded::new(index, records)
    }
}

#[derive(Clone)]
pub struct ServiceState {
    current: Arc<RwLock<Option<Arc<Loaded>>>>,
    selection: SelectionConfig,
    checker: Arc<SpecialChecker>,
    source: Option<IndexSource>,
}

impl ServiceState {
    pub fn new(selection: SelectionConfig, checker: SpecialChecker) -> Self {
        ServiceState {
            current: Arc::new(RwLock::new(None)),
            selection,
            checker: Arc::new(checker),
            source: None,
        }
    }

    pub fn with_source(mut self, source: IndexSource) -> Self {
        self.source = Some(source);
        self
    }

    /// Replaces the served index. In-flight requests keep the one they
    /// started with.
    pub fn install(&self, loaded: Loaded) {
        *self.current.write().unwrap_or_else(|e| e.into_inner()) = Some(Arc::new(loaded));
    }

    pub fn current(&self) -> Option<Arc<Loaded>> {
        self.current.read().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({"error": message.into()}))).into_response()
}

fn not_loaded() -> Response {
    error(StatusCode::SERVICE_UNAVAILABLE, "index not loaded yet")
}

pub fn router(state: ServiceState) -> Router {
    Router::new()
        .route("/search", post(search))
        .route("/models/{*registry_name}", get(model))
        .route("/healthz", get(healthz))
        .route("/reload", post(reload))
        .with_state(state)
}

async fn search(State(state): State<ServiceState>, body: Bytes) -> Response {
    let Some(loaded) = state.current() else {
        return not_loaded();
    };
    if body.iter().all(u8::is_ascii_whitespace) {
        return error(StatusCode::BAD_REQUEST, "empty request body");
    }
    let value: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed JSON: {e}")),
    };
    let request = match SearchRequest::from_json(&value).and_then(|r| r.validate().map(|_| r)) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let selection = state.selection;
    let checker = state.checker.clone();
    let result = tokio::task::spawn_blocking(move || {
        select(&request, &loaded.records, &loaded.index, &selection, checker.as_ref())
    })
    .await;
    match result {
        Ok(Ok(matches)) => Json(matches).into_response(),
        Ok(Err(e @ (SelectionError::NoTrivialFields | SelectionError::Similarity(_)))) => {
            error(StatusCode::BAD_REQUEST, e.to_string())
        }
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn model(State(state): State<ServiceState>, Path(name): Path<String>) -> Response {
    let Some(loaded) = state.current() else {
        return not_loaded();
    };
    match loaded.record(&name) {
        Some(r) => Json(r.to_json()).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown model {name}")),
    }
}

async fn healthz(State(state): State<ServiceState>) -> Response {
    match state.current() {
        Some(l) => Json(json!({
            "status": "ok",
            "corpus_records": l.records.len(),
            "indexed_docs": l.index.doc_names().len(),
        }))
        .into_response(),
        None => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({"status": "loading"}))).into_response(),
    }
}

async fn reload(State(state): State<ServiceState>) -> Response {
    let Some(source) = state.source.clone() else {
        return error(StatusCode::NOT_FOUND, "no index source configured");
    };
    match tokio::task::spawn_blocking(move || source.load()).await {
        Ok(Ok(loaded)) => {
            let n = loaded.records.len();
            state.install(loaded);
            Json(json!({"status": "reloaded", "corpus_records": n})).into_response()
        }
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("reload failed, keeping previous index: {e}")),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// Binds `addr`, loads the index in the background and serves until ctrl-c.
pub async fn serve(addr: SocketAddr, state: ServiceState) -> Result<(), CliError> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| CliError::user(format!("cannot bind {addr}: {e}")))?;
    log::info!("listening on {addr}");
    if let Some(source) = state.source.clone() {
        let loader = state.clone();
        let loaded = tokio::task::spawn_blocking(move || source.load());
        tokio::spawn(async move {
            match loaded.await {
                Ok(Ok(l)) => {
                    log::info!("loaded {} records", l.records.len());
                    loader.install(l);
                }
                Ok(Err(e)) => log::error!("initial load failed: {e}"),
                Err(e) => log::error!("initial load failed: {e}"),
            }
        });
    }
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::internal(e.to_string()))
}
