//! Chat-completion client with retries and bounded concurrency.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::{debug, warn};

use super::mock::MockTransport;
use super::GatewayError;

pub const MAX_RETRIES_CAP: u32 = 10;

/// Environment variable holding the API key for live endpoints.
pub const DEFAULT_API_KEY_ENV: &str = "LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn user(model: &str, prompt: &str, temperature: f64) -> Self {
        ChatRequest {
            model: model.to_string(),
            messages: vec![ChatMessage {
                role: "user".to_string(),
                content: prompt.to_string(),
            }],
            temperature,
        }
    }

    pub fn prompt(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransportError {
    Status(u16),
    Timeout,
    Io(String),
    BadResponse(String),
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportError::Status(s) => *s >= 500 || *s == 429,
            TransportError::Timeout | TransportError::Io(_) => true,
            TransportError::BadResponse(_) => false,
        }
    }
}

impl std::fmt::Display for TransportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransportError::Status(s) => write!(f, "HTTP status {s}"),
            TransportError::Timeout => f.write_str("timed out"),
            TransportError::Io(e) => write!(f, "transport: {e}"),
            TransportError::BadResponse(e) => write!(f, "bad response: {e}"),
        }
    }
}

/// One request/response exchange with a chat-completion backend.
pub trait ChatTransport: Send + Sync {
    fn send(&self, req: &ChatRequest) -> Result<String, TransportError>;
}

/// Pulls the first choice's message content out of a completion response.
pub fn extract_content(body: &Value) -> Result<String, TransportError> {
    body.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| TransportError::BadResponse("missing choices[0].message.content".into()))
}

/// Blocking HTTP transport speaking the chat-completion JSON format.
pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
}

impl std::fmt::Debug for HttpTransport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpTransport")
            .field("url", &self.url)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpTransport {
    pub fn new(url: &str, timeout: Duration, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        HttpTransport {
            agent,
            url: url.to_string(),
            api_key,
        }
    }
}

impl ChatTransport for HttpTransport {
    fn send(&self, req: &ChatRequest) -> Result<String, TransportError> {
        let mut call = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call.send_json(req).map_err(map_ureq)?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(TransportError::Status(status));
        }
        let body: Value = resp.body_mut().read_json().map_err(map_ureq)?;
        extract_content(&body)
    }
}

fn map_ureq(e: ureq::Error) -> TransportError {
    match e {
        ureq::Error::Timeout(_) => TransportError::Timeout,
        ureq::Error::StatusCode(s) => TransportError::Status(s),
        ureq::Error::Json(e) => TransportError::BadResponse(e.to_string()),
        other => TransportError::Io(other.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmClientConfig {
    /// Endpoint URL, or `"mock"` for the deterministic offline backend.
    pub endpoint: String,
    pub model: String,
    pub max_retries: u32,
    pub timeout_ms: u64,
    pub temperature: f64,
    pub max_in_flight: usize,
    /// Delay before the first retry; doubled on each further attempt.
    pub backoff_ms: u64,
    pub api_key_env: String,
    /// Optional JSON object mapping prompt SHA-256 to canned responses.
    pub mock_fixtures: Option<String>,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        LlmClientConfig {
            endpoint: "mock".to_string(),
            model: "mock-judge".to_string(),
            max_retries: 3,
            timeout_ms: 60_000,
            temperature: 0.7,
            max_in_flight: 8,
            backoff_ms: 250,
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            mock_fixtures: None,
        }
    }
}

impl LlmClientConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_retries > MAX_RETRIES_CAP {
            return Err(GatewayError::Config(format!(
                "max_retries {} exceeds {MAX_RETRIES_CAP}",
                self.max_retries
            )));
        }
        if self.max_in_flight == 0 {
            return Err(GatewayError::Config(
                "max_in_flight must be positive".into(),
            ));
        }
        if self.endpoint != "mock"
            && !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://"))
        {
            return Err(GatewayError::Config(format!(
                "endpoint must be `mock` or an http(s) URL, got `{}`",
                self.endpoint
            )));
        }
        Ok(())
    }

    pub fn is_mock(&self) -> bool {
        self.endpoint == "mock"
    }
}

/// Sends `prompt`, retrying retryable failures up to `cfg.max_retries` times.
pub fn complete_with_retry(
    cfg: &LlmClientConfig,
    transport: &dyn ChatTransport,
    prompt: &str,
) -> Result<String, GatewayError> {
    cfg.validate()?;
    let req = ChatRequest::user(&cfg.model, prompt, cfg.temperature);
    let attempts = cfg.max_retries + 1;
    let mut last = TransportError::Timeout;
    for attempt in 0..attempts {
        if attempt > 0 && cfg.backoff_ms > 0 {
            let delay = cfg.backoff_ms.saturating_mul(1 << (attempt - 1).min(6));
            std::thread::sleep(Duration::from_millis(delay));
        }
        match transport.send(&req) {
            Ok(text) => return Ok(text),
            Err(e) if e.is_retryable() => {
                warn!(attempt, error = %e, "completion failed, will retry");
                last = e;
            }
            Err(e) => return Err(GatewayError::Request(e.to_string())),
        }
    }
    if last == TransportError::Timeout {
        Err(GatewayError::Timeout { attempts })
    } else {
        Err(GatewayError::ExhaustedRetries {
            attempts,
            last: last.to_string(),
        })
    }
}

/// A configured client. Cheap to share across threads.
#[derive(Clone)]
pub struct LlmClient {
    cfg: LlmClientConfig,
    transport: Arc<dyn ChatTransport>,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient").field("cfg", &self.cfg).finish()
    }
}

impl LlmClient {
    /// Builds the mock backend or an HTTP transport. The API key is read from
    /// the configured environment variable and never logged.
    pub fn from_config(cfg: LlmClientConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let transport: Arc<dyn ChatTransport> = if cfg.is_mock() {
            match &cfg.mock_fixtures {
                Some(path) => Arc::new(MockTransport::from_fixture_file(path.as_ref())?),
                None => Arc::new(MockTransport::default()),
            }
        } else {
            let key = std::env::var(&cfg.api_key_env).ok();
            debug!(endpoint = %cfg.endpoint, has_key = key.is_some(), "live LLM endpoint");
            Arc::new(HttpTransport::new(
                &cfg.endpoint,
                Duration::from_millis(cfg.timeout_ms),
                key,
            ))
        };
        Ok(LlmClient { cfg, transport })
    }

    pub fn with_transport(
        cfg: LlmClientConfig,
        transport: Arc<dyn ChatTransport>,
    ) -> Result<Self, GatewayError> {
        cfg.validate()?;
        Ok(LlmClient { cfg, transport })
    }

    pub fn config(&self) -> &LlmClientConfig {
        &self.cfg
    }

    pub fn complete(&self, prompt: &str) -> Result<String, GatewayError> {
        complete_with_retry(&self.cfg, self.transport.as_ref(), prompt)
    }

    /// Completes every prompt with at most `max_in_flight` concurrent
    /// requests. Results line up with `prompts` by index.
    pub fn complete_many(&self, prompts: &[String]) -> Vec<Result<String, GatewayError>> {
        let slots: Vec<Mutex<Option<Result<String, GatewayError>>>> =
            prompts.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.cfg.max_in_flight.min(prompts.len()).max(1);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= prompts.len() {
                        break;
                    }
                    let r = self.complete(&prompts[i]);
                    *slots[i].lock().expect("slot lock") = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|s| {
                s.into_inner()
                    .expect("slot lock")
                    .expect("every slot filled")
            })
            .collect()
    }
}
