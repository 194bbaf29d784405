//! Application configuration, read from TOML.
//!
//! ```toml
//! corpus = "data/corpus.jsonl"
//! index = "data/index.jsonl"
//! offline = true
//! parallelism = 4
//!
//! [llm]
//! endpoint = "https://api.openai.com/v1/chat/completions"
//! model = "gpt-4"
//! credential_env = "OPENAI_API_KEY"
//!
//! [selection]
//! top_k = 10
//! ```
//!
//! Secrets never appear here: `credential_env` names the variable to read.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hub::DEFAULT_ENDPOINT;
use crate::llm::{ChatClient, ChatClientConfig, HttpChatClient, LlmError};
use crate::selection::SelectionConfig;
use crate::similarity::{Bm25Params, TokenizerConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{0} needs network access but the configuration is offline")]
    Offline(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub corpus: Option<PathBuf>,
    pub index: Option<PathBuf>,
    /// No chat model is configured when absent.
    pub llm: Option<ChatClientConfig>,
    pub hub_endpoint: String,
    pub bm25: Bm25Params,
    pub tokenizer: TokenizerConfig,
    pub selection: SelectionConfig,
    pub parallelism: usize,
    pub offline: bool,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            corpus: None,
            index: None,
            llm: None,
            hub_endpoint: DEFAULT_ENDPOINT.into(),
            bm25: Bm25Params::default(),
            tokenizer: TokenizerConfig::default(),
            selection: SelectionConfig::default(),
            parallelism: 4,
            offline: false,
        }
    }
}

impl AppConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: AppConfig = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.bm25.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.selection.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.parallelism == 0 {
            return Err(ConfigError::Invalid("parallelism must be at least 1".into()));
        }
        if let Some(llm) = &self.llm {
            let g = &llm.generation;
            if !(0.0..=2.0).contains(&g.temperature) || !(0.0..=1.0).contains(&g.top_p) {
                return Err(ConfigError::Invalid("generation temperature/top_p out of range".into()));
            }
        }
        Ok(())
    }

    /// Fails when offline; call before any operation that must reach the network.
    pub fn require_network(&self, operation: &str) -> Result<(), ConfigError> {
        if self.offline {
            Err(ConfigError::Offline(operation.into()))
        } else {
            Ok(())
        }
    }

    /// The configured chat client, or `None` when offline or unconfigured.
    pub fn chat_client(&self) -> Result<Option<Arc<dyn ChatClient>>, ConfigError> {
        match (&self.llm, self.offline) {
            (Some(llm), false) => Ok(Some(Arc::new(HttpChatClient::from_env(llm.clone())?))),
            _ => Ok(None),
        }
    }
}
