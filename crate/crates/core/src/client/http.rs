//! Chat-completions client with retries, a token-bucket rate limiter and a
//! bound on in-flight requests.

use super::{Agent, AgentInfo, ClientError, Completion, OracleView};
use crate::prompt::{Message, MessageList};
use serde::{Deserialize, Serialize};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};
use tracing::{debug, warn};

fn default_endpoint() -> String {
    "https://api.openai.com/v1/chat/completions".into()
}
fn default_model() -> String {
    "gpt-3.5-turbo".into()
}
fn default_key_env() -> String {
    "OPENAI_API_KEY".into()
}
fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    5
}
fn default_backoff_base() -> f64 {
    1.0
}
fn default_backoff_multiplier() -> f64 {
    2.0
}
fn default_concurrency() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    #[serde(default = "default_endpoint")]
    pub endpoint: String,
    #[serde(default = "default_model")]
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_base")]
    pub backoff_base_secs: f64,
    #[serde(default = "default_backoff_multiplier")]
    pub backoff_multiplier: f64,
    #[serde(default = "default_concurrency")]
    pub max_concurrent: usize,
    /// Sustained request rate; unlimited when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requests_per_second: Option<f64>,
    /// Extra request-body fields (temperature, ...). None are sent by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoding: Option<serde_json::Map<String, serde_json::Value>>,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            endpoint: default_endpoint(),
            model: default_model(),
            api_key_env: default_key_env(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_base_secs: default_backoff_base(),
            backoff_multiplier: default_backoff_multiplier(),
            max_concurrent: default_concurrency(),
            requests_per_second: None,
            decoding: None,
        }
    }
}

impl ClientConfig {
    /// Delay before retry number `retry` (0-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let secs = self.backoff_base_secs * self.backoff_multiplier.powi(retry as i32);
        Duration::from_secs_f64(secs.max(0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
    /// Parsed `Retry-After` header, in seconds.
    pub retry_after: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("{0}")]
    Other(String),
}

impl TransportError {
    fn is_transient(&self) -> bool {
        !matches!(self, TransportError::Other(_))
    }
}

pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &str) -> Result<HttpReply, TransportError>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent }
    }
}

fn map_ureq(e: ureq::Error) -> TransportError {
    match e {
        ureq::Error::Timeout(t) => TransportError::Timeout(t.to_string()),
        ureq::Error::Io(io) => TransportError::Connect(io.to_string()),
        ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => TransportError::Connect(e.to_string()),
        other => TransportError::Other(other.to_string()),
    }
}

impl Transport for UreqTransport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &str) -> Result<HttpReply, TransportError> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(token) = bearer {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send(body).map_err(map_ureq)?;
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse().ok());
        let body = resp.body_mut().read_to_string().map_err(map_ureq)?;
        Ok(HttpReply {
            status,
            body,
            retry_after,
        })
    }
}

/// Counting semaphore bounding concurrent requests; remembers the peak.
#[derive(Debug)]
pub struct InflightGate {
    limit: usize,
    state: Mutex<(usize, usize)>,
    cv: Condvar,
}

pub struct InflightPermit<'a> {
    gate: &'a InflightGate,
}

impl InflightGate {
    pub fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            state: Mutex::new((0, 0)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InflightPermit<'_> {
        let mut s = self.state.lock().unwrap_or_else(|e| e.into_inner());
        while s.0 >= self.limit {
            s = self.cv.wait(s).unwrap_or_else(|e| e.into_inner());
        }
        s.0 += 1;
        s.1 = s.1.max(s.0);
        InflightPermit { gate: self }
    }

    pub fn peak(&self) -> usize {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).1
    }

    pub fn limit(&self) -> usize {
        self.limit
    }
}

impl Drop for InflightPermit<'_> {
    fn drop(&mut self) {
        let mut s = self.gate.state.lock().unwrap_or_else(|e| e.into_inner());
        s.0 -= 1;
        self.gate.cv.notify_one();
    }
}

#[derive(Debug)]
pub struct TokenBucket {
    rate: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(rate_per_sec: f64) -> Self {
        let capacity = rate_per_sec.max(1.0);
        Self {
            rate: rate_per_sec,
            capacity,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    /// Blocks until a token is available, then consumes it.
    pub fn take(&self) {
        loop {
            let wait = {
                let mut s = self.state.lock().unwrap_or_else(|e| e.into_inner());
                let now = Instant::now();
                s.0 = (s.0 + now.duration_since(s.1).as_secs_f64() * self.rate).min(self.capacity);
                s.1 = now;
                if s.0 >= 1.0 {
                    s.0 -= 1.0;
                    return;
                }
                (1.0 - s.0) / self.rate
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

#[derive(Serialize)]
struct RequestBody<'a> {
    model: &'a str,
    messages: &'a [Message],
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    decoding: Option<&'a serde_json::Map<String, serde_json::Value>>,
}

#[derive(Deserialize)]
struct ResponseBody {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

pub struct ChatClient<T = UreqTransport> {
    config: ClientConfig,
    transport: T,
    gate: InflightGate,
    bucket: Option<TokenBucket>,
}

impl ChatClient<UreqTransport> {
    pub fn new(config: ClientConfig) -> Self {
        let transport = UreqTransport::new(Duration::from_secs_f64(config.timeout_secs.max(0.001)));
        Self::with_transport(config, transport)
    }
}

impl<T: Transport> ChatClient<T> {
    pub fn with_transport(config: ClientConfig, transport: T) -> Self {
        let gate = InflightGate::new(config.max_concurrent);
        let bucket = config.requests_per_second.filter(|r| *r > 0.0).map(TokenBucket::new);
        Self {
            config,
            transport,
            gate,
            bucket,
        }
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    /// Highest number of simultaneous requests observed so far.
    pub fn peak_inflight(&self) -> usize {
        self.gate.peak()
    }

    pub fn request_body(&self, messages: &[Message]) -> String {
        serde_json::to_string(&RequestBody {
            model: &self.config.model,
            messages,
            decoding: self.config.decoding.as_ref(),
        })
        .expect("request body serializes")
    }

    fn api_key(&self) -> Option<String> {
        std::env::var(&self.config.api_key_env).ok().filter(|k| !k.is_empty())
    }

    pub fn complete(&self, messages: &[Message]) -> Result<Completion, ClientError> {
        let body = self.request_body(messages);
        let key = self.api_key();
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                debug!(attempt, "retrying chat completion");
            }
            if let Some(bucket) = &self.bucket {
                bucket.take();
            }
            let result = {
                let _permit = self.gate.acquire();
                self.transport.post_json(&self.config.endpoint, key.as_deref(), &body)
            };
            let mut delay = self.config.backoff(attempt);
            match result {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    if attempt > 0 {
                        debug!(retries = attempt, "chat completion succeeded after retries");
                    }
                    return parse_reply(&reply.body).map(|content| Completion {
                        content,
                        retries: attempt,
                    });
                }
                Ok(reply) if reply.status == 401 || reply.status == 403 => {
                    return Err(ClientError::Auth { status: reply.status });
                }
                Ok(reply) if reply.status == 429 || reply.status >= 500 => {
                    if let Some(secs) = reply.retry_after {
                        delay = delay.max(Duration::from_secs(secs));
                    }
                    last = format!("HTTP {}", reply.status);
                }
                Ok(reply) => {
                    return Err(ClientError::Rejected {
                        status: reply.status,
                        body: reply.body,
                    });
                }
                Err(e) if e.is_transient() => last = e.to_string(),
                Err(e) => {
                    return Err(ClientError::Exhausted {
                        attempts: attempt + 1,
                        last: e.to_string(),
                    })
                }
            }
            if attempt + 1 < attempts {
                warn!(%last, retry_in = ?delay, "transient chat completion failure");
                std::thread::sleep(delay);
            }
        }
        Err(ClientError::Exhausted { attempts, last })
    }
}

fn parse_reply(body: &str) -> Result<String, ClientError> {
    let malformed = || ClientError::MalformedResponse { body: body.to_string() };
    let parsed: ResponseBody = serde_json::from_str(body).map_err(|_| malformed())?;
    parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(malformed)
}

impl<T: Transport> Agent for ChatClient<T> {
    fn complete(&self, messages: &MessageList, _view: &OracleView) -> Result<Completion, ClientError> {
        ChatClient::complete(self, messages)
    }

    fn info(&self) -> AgentInfo {
        AgentInfo {
            name: "http".into(),
            model: Some(self.config.model.clone()),
            decoding: self.config.decoding.clone(),
        }
    }
}
