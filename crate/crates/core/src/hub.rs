//! Single-model listing fetcher for a Hugging Face compatible hub.

use std::thread;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use crate::card::HubListing;
use crate::llm::map_bounded;

pub const DEFAULT_ENDPOINT: &str = "https://huggingface.co";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HubError {
    #[error("network error: {0}")]
    Network(String),
    #[error("model `{0}` not found")]
    NotFound(String),
    #[error("rate limited (retry after {retry_after:?})")]
    RateLimited { retry_after: Option<Duration> },
}

#[derive(Deserialize)]
struct ModelInfo {
    #[serde(default, alias = "modelId")]
    id: Option<String>,
    #[serde(default)]
    downloads: u64,
    #[serde(default)]
    likes: u64,
    #[serde(default)]
    tags: Vec<String>,
    #[serde(default)]
    pipeline_tag: Option<String>,
    #[serde(default, rename = "createdAt")]
    created_at: Option<String>,
    #[serde(default, rename = "lastModified")]
    last_modified: Option<String>,
}

fn year_of(ts: &Option<String>) -> Option<i32> {
    ts.as_deref()?.get(..4)?.parse().ok()
}

/// `name` or `org/name`, hub-safe characters only.
pub fn is_valid_model_id(id: &str) -> bool {
    let part_ok = |p: &str| {
        !p.is_empty()
            && p.len() <= 96
            && p.chars().next().is_some_and(|c| c.is_ascii_alphanumeric())
            && p.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
            && !p.contains("..")
    };
    let parts: Vec<&str> = id.split('/').collect();
    matches!(parts.len(), 1 | 2) && parts.iter().all(|p| part_ok(p))
}

#[derive(Debug, Clone)]
pub struct HubClient {
    endpoint: String,
    agent: ureq::Agent,
    /// Attempts made after a 429 before giving up.
    pub rate_limit_retries: u32,
    /// Used when a 429 carries no `Retry-After`.
    pub default_backoff: Duration,
    pub max_concurrency: usize,
}

impl HubClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(30)))
            .http_status_as_error(false)
            .build()
            .into();
        HubClient {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            agent,
            rate_limit_retries: 3,
            default_backoff: Duration::from_secs(2),
            max_concurrency: 4,
        }
    }

    /// One request, no retry.
    pub fn fetch_once(&self, registry_name: &str) -> Result<HubListing, HubError> {
        if !is_valid_model_id(registry_name) {
            return Err(HubError::NotFound(registry_name.to_string()));
        }
        let url = format!("{}/api/models/{}", self.endpoint, registry_name);
        let mut resp = self
            .agent
            .get(&url)
            .call()
            .map_err(|e| HubError::Network(e.to_string()))?;
        match resp.status().as_u16() {
            200 => {}
            401 | 404 => return Err(HubError::NotFound(registry_name.to_string())),
            429 => {
                let retry_after = resp
                    .headers()
                    .get("retry-after")
                    .and_then(|v| v.to_str().ok())
                    .and_then(|v| v.trim().parse::<u64>().ok())
                    .map(Duration::from_secs);
                return Err(HubError::RateLimited { retry_after });
            }
            other => return Err(HubError::Network(format!("HTTP {other}"))),
        }
        let info: ModelInfo = resp
            .body_mut()
            .read_json()
            .map_err(|e| HubError::Network(format!("bad model info: {e}")))?;
        Ok(HubListing {
            registry_name: info.id.unwrap_or_else(|| registry_name.to_string()),
            downloads: info.downloads,
            likes: info.likes,
            contributors: None,
            commits: None,
            tags: info.tags,
            task: info.pipeline_tag,
            first_commit_year: year_of(&info.created_at),
            last_commit_year: year_of(&info.last_modified),
        })
    }

    /// Fetches with back-off on rate limiting, honoring `Retry-After`.
    pub fn fetch(&self, registry_name: &str) -> Result<HubListing, HubError> {
        let mut attempt = 0;
        loop {
            match self.fetch_once(registry_name) {
                Err(HubError::RateLimited { retry_after }) if attempt < self.rate_limit_retries => {
                    attempt += 1;
                    let wait = retry_after.unwrap_or(self.default_backoff * attempt);
                    log::info!("rate limited fetching {registry_name}; sleeping {wait:?}");
                    thread::sleep(wait);
                }
                other => return other,
            }
        }
    }

    /// Fetches many listings with at most `max_concurrency` requests in flight.
    pub fn fetch_many(&self, names: &[String]) -> Vec<Result<HubListing, HubError>> {
        map_bounded(names, self.max_concurrency, |n| self.fetch(n))
    }
}

pub fn fetch_hub_listing(registry_name: &str, endpoint: &str) -> Result<HubListing, HubError> {
    HubClient::new(endpoint).fetch(registry_name)
}
