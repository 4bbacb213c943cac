//! Chat-completion backends.
//!
//! All three speak in terms of a message list and return the assistant's
//! text: [`HttpBackend`] calls an OpenAI-compatible `chat/completions`
//! endpoint, [`RecordedBackend`] replays captured responses of that same
//! wire shape, and [`EchoBackend`] answers deterministically without I/O.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        ChatMessage {
            role,
            content: content.into(),
        }
    }
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &'static str;
    async fn complete(&self, messages: &[ChatMessage]) -> Result<String>;
}

/// An API credential. Never printed, never serialized.
#[derive(Clone)]
pub struct ApiKey(String);

impl ApiKey {
    pub fn new(key: impl Into<String>) -> Self {
        ApiKey(key.into())
    }

    pub fn from_env(var: &str) -> Result<Self> {
        match std::env::var(var) {
            Ok(v) if !v.trim().is_empty() => Ok(ApiKey(v.trim().to_string())),
            _ => Err(Error::Config(format!(
                "assistant backend needs a credential in environment variable {var}"
            ))),
        }
    }

    fn expose(&self) -> &str {
        &self.0
    }

    /// Replaces every occurrence of the key in `text`. Upstream services
    /// sometimes echo the offending key back in error bodies.
    pub fn scrub(&self, text: &str) -> String {
        text.replace(&self.0, "<redacted>")
    }
}

impl fmt::Debug for ApiKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ApiKey(<redacted>)")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Echo,
    Recorded,
    Http,
}

pub const DEFAULT_CREDENTIAL_ENV: &str = "TILESCOPE_ASSISTANT_API_KEY";

/// Backend selection and limits. The credential itself is not a field: it
/// is read from the environment variable named by `credential_env`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Full URL of the chat-completions endpoint (HTTP backend).
    pub endpoint: Option<String>,
    pub model: String,
    pub timeout_ms: u64,
    pub max_context_turns: usize,
    pub max_in_flight: usize,
    pub credential_env: String,
    /// Recorded-exchange fixture (recorded backend).
    pub fixture: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Echo,
            endpoint: None,
            model: "gpt-4o".into(),
            timeout_ms: 30_000,
            max_context_turns: 8,
            max_in_flight: 4,
            credential_env: DEFAULT_CREDENTIAL_ENV.into(),
            fixture: None,
        }
    }
}

impl BackendConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn validate(&self) -> Result<()> {
        if self.timeout_ms == 0 {
            return Err(Error::Config("assistant timeout_ms must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("assistant max_in_flight must be positive".into()));
        }
        Ok(())
    }

    /// Instantiates the configured backend. Missing credentials and
    /// fixtures fail here, at startup, rather than per request.
    pub fn build(&self) -> Result<Arc<dyn ChatBackend>> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::Echo => Arc::new(EchoBackend),
            BackendKind::Recorded => {
                let path = self
                    .fixture
                    .as_ref()
                    .ok_or_else(|| Error::Config("recorded backend needs `fixture`".into()))?;
                Arc::new(RecordedBackend::load(path)?)
            }
            BackendKind::Http => {
                let endpoint = self
                    .endpoint
                    .clone()
                    .ok_or_else(|| Error::Config("http backend needs `endpoint`".into()))?;
                let key = ApiKey::from_env(&self.credential_env)?;
                Arc::new(HttpBackend::new(endpoint, self.model.clone(), key, self.timeout())?)
            }
        })
    }
}

/// Deterministic reply: a digest of the system context plus the user text.
#[derive(Debug, Default, Clone, Copy)]
pub struct EchoBackend;

impl EchoBackend {
    pub fn reply_for(messages: &[ChatMessage]) -> String {
        let system = messages
            .iter()
            .find(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        let user = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        let digest = hex::encode(&Sha256::digest(system.as_bytes())[..8]);
        format!("echo[{digest}]: {user}")
    }
}

#[async_trait]
impl ChatBackend for EchoBackend {
    fn name(&self) -> &'static str {
        "echo"
    }

    async fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        Ok(EchoBackend::reply_for(messages))
    }
}

#[derive(Debug, Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Debug, Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

/// Pulls `choices[0].message.content` out of a chat-completion body.
pub fn parse_completion(body: &serde_json::Value) -> Result<String> {
    let parsed: CompletionResponse = serde_json::from_value(body.clone()).map_err(|e| Error::Upstream {
        status: None,
        message: format!("unexpected completion shape: {e}"),
    })?;
    parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| Error::Upstream {
            status: None,
            message: "completion carried no message content".into(),
        })
}

/// Pulls a readable message out of an error body, if it has one.
fn upstream_message(body: &str) -> String {
    serde_json::from_str::<serde_json::Value>(body)
        .ok()
        .and_then(|v| v.pointer("/error/message").and_then(|m| m.as_str()).map(str::to_string))
        .unwrap_or_else(|| body.chars().take(200).collect())
}

pub struct HttpBackend {
    client: reqwest::Client,
    endpoint: String,
    model: String,
    key: ApiKey,
    timeout: Duration,
}

impl fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("key", &self.key)
            .finish()
    }
}

impl HttpBackend {
    pub fn new(endpoint: String, model: String, key: ApiKey, timeout: Duration) -> Result<Self> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(HttpBackend {
            client,
            endpoint,
            model,
            key,
            timeout,
        })
    }
}

#[async_trait]
impl ChatBackend for HttpBackend {
    fn name(&self) -> &'static str {
        "http"
    }

    async fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        match self.exchange(messages).await {
            Ok(text) => Ok(self.key.scrub(&text)),
            Err(Error::Upstream { status, message }) => Err(Error::Upstream {
                status,
                message: self.key.scrub(&message),
            }),
            Err(e) => Err(e),
        }
    }
}

impl HttpBackend {
    async fn exchange(&self, messages: &[ChatMessage]) -> Result<String> {
        let req = CompletionRequest {
            model: &self.model,
            messages,
        };
        let timeout_err = || Error::UpstreamTimeout {
            after_ms: self.timeout.as_millis() as u64,
        };
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(self.key.expose())
            .json(&req)
            .send()
            .await
            .map_err(|e| {
                if e.is_timeout() {
                    timeout_err()
                } else {
                    // reqwest errors never include request headers.
                    Error::Upstream {
                        status: None,
                        message: format!("request failed: {}", e.without_url()),
                    }
                }
            })?;
        let status = resp.status();
        let text = resp.text().await.map_err(|e| {
            if e.is_timeout() {
                timeout_err()
            } else {
                Error::Upstream {
                    status: Some(status.as_u16()),
                    message: format!("reading body: {}", e.without_url()),
                }
            }
        })?;
        if !status.is_success() {
            return Err(Error::Upstream {
                status: Some(status.as_u16()),
                message: upstream_message(&text),
            });
        }
        let body: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Upstream {
            status: Some(status.as_u16()),
            message: format!("completion body is not JSON: {e}"),
        })?;
        parse_completion(&body)
    }
}

/// One captured exchange: the HTTP status and the response body.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordedExchange {
    pub status: u16,
    pub body: serde_json::Value,
}

/// Replays recorded exchanges in order, wrapping around at the end.
#[derive(Debug)]
pub struct RecordedBackend {
    exchanges: Vec<RecordedExchange>,
    cursor: AtomicUsize,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FixtureFile {
    Many(Vec<RecordedExchange>),
    One(RecordedExchange),
}

impl RecordedBackend {
    pub fn new(exchanges: Vec<RecordedExchange>) -> Result<Self> {
        if exchanges.is_empty() {
            return Err(Error::Config("recorded fixture holds no exchanges".into()));
        }
        Ok(RecordedBackend {
            exchanges,
            cursor: AtomicUsize::new(0),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("fixture {}: {e}", path.display())))?;
        let parsed: FixtureFile =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("fixture {}: {e}", path.display())))?;
        RecordedBackend::new(match parsed {
            FixtureFile::Many(v) => v,
            FixtureFile::One(x) => vec![x],
        })
    }
}

#[async_trait]
impl ChatBackend for RecordedBackend {
    fn name(&self) -> &'static str {
        "recorded"
    }

    async fn complete(&self, _messages: &[ChatMessage]) -> Result<String> {
        let i = self.cursor.fetch_add(1, Ordering::Relaxed) % self.exchanges.len();
        let ex = &self.exchanges[i];
        if !(200..300).contains(&ex.status) {
            return Err(Error::Upstream {
                status: Some(ex.status),
                message: upstream_message(&ex.body.to_string()),
            });
        }
        parse_completion(&ex.body)
    }
}
