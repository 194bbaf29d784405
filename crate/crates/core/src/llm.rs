//! Chat-completions client contract, an HTTP implementation and offline stubs.

use std::collections::VecDeque;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("network error: {0}")]
    Network(String),
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("prompt needs ~{needed} tokens, budget is {budget}")]
    BudgetExceeded { needed: usize, budget: usize },
    #[error("credential variable `{0}` is not set")]
    MissingCredential(String),
    #[error("no canned response for prompt digest {0}")]
    NoCannedResponse(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

/// Anything that can answer a chat-completions prompt.
pub trait ChatClient: Send + Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, LlmError>;
}

/// Stable digest of a message list; keys the stub fixtures.
pub fn prompt_digest(messages: &[ChatMessage]) -> String {
    let mut hasher = Sha256::new();
    for m in messages {
        hasher.update(m.role.as_bytes());
        hasher.update([0u8]);
        hasher.update(m.content.as_bytes());
        hasher.update([0u8]);
    }
    hex::encode(hasher.finalize())
}

/// 4 characters per token, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            temperature: 0.0,
            top_p: 0.95,
            max_tokens: 1024,
        }
    }
}

/// Endpoint settings. Holds the *name* of the credential variable only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatClientConfig {
    pub endpoint: String,
    pub model: String,
    pub credential_env: String,
    pub generation: GenerationParams,
    pub timeout_secs: u64,
    /// Transport-level retries (network errors, 429, 5xx).
    pub retries: u32,
}

impl Default for ChatClientConfig {
    fn default() -> Self {
        ChatClientConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4".into(),
            credential_env: "OPENAI_API_KEY".into(),
            generation: GenerationParams::default(),
            timeout_secs: 60,
            retries: 2,
        }
    }
}

pub struct HttpChatClient {
    config: ChatClientConfig,
    credential: Option<String>,
    agent: ureq::Agent,
}

impl fmt::Debug for HttpChatClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpChatClient")
            .field("config", &self.config)
            .field("credential", &self.credential.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpChatClient {
    /// Reads the credential from the configured variable. An empty variable
    /// name means the endpoint needs no credential.
    pub fn from_env(config: ChatClientConfig) -> Result<Self, LlmError> {
        let credential = if config.credential_env.is_empty() {
            None
        } else {
            Some(
                std::env::var(&config.credential_env)
                    .map_err(|_| LlmError::MissingCredential(config.credential_env.clone()))?,
            )
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpChatClient {
            config,
            credential,
            agent,
        })
    }

    fn request_body(&self, messages: &[ChatMessage]) -> Value {
        let g = &self.config.generation;
        json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": g.temperature,
            "top_p": g.top_p,
            "max_tokens": g.max_tokens,
        })
    }

    fn attempt(&self, body: &Value) -> Result<String, Attempt> {
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.credential {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(Attempt::Retry(None, true)),
            Err(e) => return Err(Attempt::Retry(Some(e.to_string()), false)),
        };
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(Some(format!("HTTP {status}")), false));
        }
        if status >= 400 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Attempt::Fatal(format!("HTTP {status}: {}", truncate(&text, 200))));
        }
        let value: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| Attempt::Fatal(format!("bad response body: {e}")))?;
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Attempt::Fatal("response lacks choices[0].message.content".into()))
    }
}

enum Attempt {
    Retry(Option<String>, bool),
    Fatal(String),
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, LlmError> {
        let body = self.request_body(messages);
        let attempts = self.config.retries + 1;
        let mut last = None;
        let mut timed_out = false;
        for attempt in 0..attempts {
            if attempt > 0 {
                thread::sleep(Duration::from_millis(250 << attempt.min(6)));
            }
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(msg)) => return Err(LlmError::Network(msg)),
                Err(Attempt::Retry(msg, timeout)) => {
                    timed_out = timeout;
                    last = msg;
                }
            }
        }
        if timed_out {
            Err(LlmError::Timeout { attempts })
        } else {
            Err(LlmError::Network(last.unwrap_or_default()))
        }
    }
}

/// Serves canned responses from `<dir>/<prompt digest>.txt`.
#[derive(Debug, Clone)]
pub struct StubChatClient {
    dir: PathBuf,
}

impl StubChatClient {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        StubChatClient { dir: dir.into() }
    }

    pub fn fixture_path(&self, messages: &[ChatMessage]) -> PathBuf {
        self.dir.join(format!("{}.txt", prompt_digest(messages)))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl ChatClient for StubChatClient {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, LlmError> {
        let path = self.fixture_path(messages);
        std::fs::read_to_string(&path).map_err(|_| LlmError::NoCannedResponse(prompt_digest(messages)))
    }
}

/// Returns queued responses in order, regardless of the prompt. Records every
/// prompt it receives.
#[derive(Debug, Default)]
pub struct ScriptedChatClient {
    responses: Mutex<VecDeque<Result<String, LlmError>>>,
    seen: Mutex<Vec<Vec<ChatMessage>>>,
}

impl ScriptedChatClient {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedChatClient {
            responses: Mutex::new(responses.into_iter().map(|s| Ok(s.into())).collect()),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn push_error(&self, err: LlmError) {
        self.responses.lock().unwrap().push_back(Err(err));
    }

    pub fn calls(&self) -> usize {
        self.seen.lock().unwrap().len()
    }

    pub fn prompts(&self) -> Vec<Vec<ChatMessage>> {
        self.seen.lock().unwrap().clone()
    }
}

impl ChatClient for ScriptedChatClient {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, LlmError> {
        self.seen.lock().unwrap().push(messages.to_vec());
        self.responses
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| Err(LlmError::NoCannedResponse(prompt_digest(messages))))
    }
}

/// Pulls the first JSON object out of a model response, tolerating code
/// fences and surrounding prose.
pub fn parse_json_object(text: &str) -> Option<Map<String, Value>> {
    if let Ok(Value::Object(m)) = serde_json::from_str(text.trim()) {
        return Some(m);
    }
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    if end <= start {
        return None;
    }
    match serde_json::from_str(&text[start..=end]) {
        Ok(Value::Object(m)) => Some(m),
        _ => None,
    }
}

/// Runs `f` over `items` on at most `limit` threads; output order matches input.
pub fn map_bounded<T, R, F>(items: &[T], limit: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let limit = limit.max(1).min(items.len().max(1));
    if limit == 1 {
        return items.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    thread::scope(|scope| {
        for _ in 0..limit {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every slot is filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    #[test]
    fn generation_defaults() {
        let g = GenerationParams::default();
        assert_eq!(g.temperature, 0.0);
        assert_eq!(g.top_p, 0.95);
    }

    #[test]
    fn json_object_extraction() {
        assert!(parse_json_object("{\"a\": 1}").is_some());
        assert!(parse_json_object("Sure!\n```json\n{\"a\": {\"b\": 2}}\n```").is_some());
        assert!(parse_json_object("no json here").is_none());
        assert!(parse_json_object("[1, 2]").is_none());
    }

    #[test]
    fn bounded_map_preserves_order() {
        let items: Vec<u32> = (0..50).collect();
        let out = map_bounded(&items, 4, |x| x * 2);
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert!(map_bounded(&Vec::<u32>::new(), 4, |x| *x).is_empty());
    }

    #[test]
    fn credential_is_redacted() {
        std::env::set_var("PTMSEL_TEST_KEY", "sk-secret");
        let client = HttpChatClient::from_env(ChatClientConfig {
            credential_env: "PTMSEL_TEST_KEY".into(),
            ..Default::default()
        })
        .unwrap();
        let debug = format!("{client:?}");
        assert!(!debug.contains("sk-secret"));
        let config_json = serde_json::to_string(&client.config).unwrap();
        assert!(!config_json.contains("sk-secret"));
    }

    #[test]
    fn missing_credential_is_an_error() {
        let err = HttpChatClient::from_env(ChatClientConfig {
            credential_env: "PTMSEL_DEFINITELY_UNSET".into(),
            ..Default::default()
        })
        .unwrap_err();
        assert_eq!(err, LlmError::MissingCredential("PTMSEL_DEFINITELY_UNSET".into()));
    }

    #[test]
    fn http_client_speaks_chat_completions() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = thread::spawn(move || {
            let (mut sock, _) = listener.accept().unwrap();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            // Read headers + body.
            loop {
                let n = sock.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
                let text = String::from_utf8_lossy(&buf);
                if let Some(h) = text.find("\r\n\r\n") {
                    let len = text[..h]
                        .lines()
                        .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                        .unwrap_or(0);
                    if buf.len() >= h + 4 + len {
                        break;
                    }
                }
            }
            let body = r#"{"choices":[{"message":{"role":"assistant","content":"hello"}}]}"#;
            write!(
                sock,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                body.len(),
                body
            )
            .unwrap();
            String::from_utf8(buf).unwrap()
        });
        let client = HttpChatClient::from_env(ChatClientConfig {
            endpoint: format!("http://{addr}/v1/chat/completions"),
            credential_env: String::new(),
            ..Default::default()
        })
        .unwrap();
        let out = client.complete(&[ChatMessage::user("hi")]).unwrap();
        assert_eq!(out, "hello");
        let request = server.join().unwrap();
        let body = &request[request.find("\r\n\r\n").unwrap() + 4..];
        let v: Value = serde_json::from_str(body).unwrap();
        assert_eq!(v["temperature"], 0.0);
        assert_eq!(v["top_p"], 0.95);
        assert_eq!(v["messages"][0]["role"], "user");
    }

    #[test]
    fn stub_reads_by_digest() {
        let dir = tempfile::tempdir().unwrap();
        let stub = StubChatClient::new(dir.path());
        let msgs = [ChatMessage::user("q")];
        assert!(matches!(stub.complete(&msgs), Err(LlmError::NoCannedResponse(_))));
        std::fs::write(stub.fixture_path(&msgs), "answer").unwrap();
        assert_eq!(stub.complete(&msgs).unwrap(), "answer");
    }
}
