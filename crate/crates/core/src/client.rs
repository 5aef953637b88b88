//! Chat-completions client with retries, bounded concurrency and full
//! capture of every exchange.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::exec::Exec;
use crate::prompt::{PromptRef, RenderedPrompt};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("invalid endpoint config: {0}")]
    Config(String),
    #[error("endpoint rejected the request with status {status}")]
    Rejected { status: u16 },
    #[error("retries exhausted after {attempts} attempts (last status {})", last_status.map_or("none".to_owned(), |s| s.to_string()))]
    Exhausted { attempts: u32, last_status: Option<u16> },
    #[error("malformed reply envelope: {0}")]
    Envelope(String),
}

fn default_backoff_base_ms() -> u64 {
    500
}

fn default_backoff_cap_ms() -> u64 {
    16_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_id: String,
    /// Name of the environment variable holding the API key. The key itself
    /// never leaves this module.
    pub api_key_env: String,
    #[serde(default)]
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_backoff_cap_ms")]
    pub backoff_cap_ms: u64,
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        let fail = |m: &str| Err(ClientError::Config(m.to_owned()));
        if self.base_url.is_empty() {
            return fail("base_url is empty");
        }
        if self.model_id.is_empty() {
            return fail("model_id is empty");
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return fail("temperature must be a finite value >= 0");
        }
        if self.max_output_tokens == 0 {
            return fail("max_output_tokens must be positive");
        }
        if self.timeout_ms == 0 {
            return fail("timeout_ms must be positive");
        }
        if self.max_in_flight == 0 {
            return fail("max_in_flight must be at least 1");
        }
        if self.max_retries > 16 {
            return fail("max_retries must be at most 16");
        }
        if self.backoff_base_ms > self.backoff_cap_ms {
            return fail("backoff_base_ms exceeds backoff_cap_ms");
        }
        Ok(())
    }

    pub fn endpoint_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    /// Upper bound of the wait before retry number `retry` (1-based).
    pub fn backoff_ceiling(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.backoff_base_ms.saturating_mul(factor).min(self.backoff_cap_ms))
    }
}

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
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(prompt: &RenderedPrompt, config: &EndpointConfig) -> Self {
        let mut messages = Vec::with_capacity(2);
        if let Some(system) = &prompt.system_text {
            messages.push(ChatMessage { role: "system".into(), content: system.clone() });
        }
        messages.push(ChatMessage { role: "user".into(), content: prompt.user_text.clone() });
        ChatRequest {
            model: config.model_id.clone(),
            messages,
            temperature: config.temperature,
            max_tokens: config.max_output_tokens,
        }
    }

    /// Compact encoding sent on the wire; its digest keys replay scripts.
    pub fn body(&self) -> String {
        serde_json::to_string(self).expect("requests serialize")
    }
}

/// Builds the reply envelope an OpenAI-compatible endpoint returns.
pub fn completion_body(content: &str) -> String {
    serde_json::json!({
        "object": "chat.completion",
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": content},
            "finish_reason": "stop"
        }]
    })
    .to_string()
}

/// Extracts `choices[0].message.content` from a reply body.
pub fn extract_content(body: &str) -> Result<String, ClientError> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| ClientError::Envelope(format!("body is not JSON: {e}")))?;
    let content = value
        .get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .and_then(|m| m.get("content"))
        .ok_or_else(|| ClientError::Envelope("missing choices[0].message.content".into()))?;
    match content.as_str() {
        Some("") => Err(ClientError::Envelope("message content is empty".into())),
        Some(s) => Ok(s.to_owned()),
        None => Err(ClientError::Envelope("message content is not a string".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

/// One POST of a request body. `Err` means no HTTP response arrived
/// (connection failure or timeout).
pub trait Transport: Send + Sync {
    fn post(&self, url: &str, body: &str, api_key: Option<&str>) -> Result<HttpReply, String>;
}

pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpTransport { agent }
    }
}

impl Transport for HttpTransport {
    fn post(&self, url: &str, body: &str, api_key: Option<&str>) -> Result<HttpReply, String> {
        let mut request = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = api_key {
            request = request.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = request.send(body).map_err(|e| e.to_string())?;
        let status = response.status().as_u16();
        let body = response.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(HttpReply { status, body })
    }
}

/// Time source for exchange timestamps and backoff waits.
pub trait Clock: Send + Sync {
    fn wall_ms(&self) -> u64;
    fn monotonic(&self) -> Instant {
        Instant::now()
    }
    fn sleep(&self, d: Duration);
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn wall_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d)
    }
}

/// Reports a constant wall time and zero elapsed time, and skips backoff
/// waits. For golden-file tests.
pub struct FixedClock(pub u64);

impl Clock for FixedClock {
    fn wall_ms(&self) -> u64 {
        self.0
    }

    fn monotonic(&self) -> Instant {
        static ORIGIN: std::sync::OnceLock<Instant> = std::sync::OnceLock::new();
        *ORIGIN.get_or_init(Instant::now)
    }

    fn sleep(&self, _: Duration) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExchangeOutcome {
    Ok,
    EnvelopeError,
    TransportError,
}

/// Everything observed while answering one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExchangeRecord {
    /// Position of the prompt in the run, dense from 0.
    pub sequence: u64,
    pub prompt_ref: PromptRef,
    pub request_body: String,
    pub request_body_digest: String,
    pub outcome: ExchangeOutcome,
    /// Status of the final attempt, absent if it got no response.
    pub http_status: Option<u16>,
    /// Status of every attempt in order; 0 marks an attempt with no response.
    pub attempt_statuses: Vec<u16>,
    pub attempt_count: u32,
    /// Message content, verbatim. Present only for `ok` outcomes.
    pub raw_response_text: Option<String>,
    /// Full body of the final response.
    pub response_body: Option<String>,
    pub error: Option<String>,
    pub api_key_present: bool,
    pub started_at_ms: u64,
    pub wall_time_ms: u64,
}

impl ExchangeRecord {
    pub fn is_ok(&self) -> bool {
        self.outcome == ExchangeOutcome::Ok
    }

    /// Zeroes the wall-clock fields.
    pub fn normalize_time(&mut self) {
        self.started_at_ms = 0;
        self.wall_time_ms = 0;
    }
}

/// A failed exchange; the record is still complete and ledgerable.
#[derive(Debug)]
pub struct ExchangeFailure {
    pub record: Box<ExchangeRecord>,
    pub error: ClientError,
}

fn retryable(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

pub struct EndpointClient {
    config: EndpointConfig,
    api_key: Option<String>,
    transport: Arc<dyn Transport>,
    clock: Arc<dyn Clock>,
}

impl EndpointClient {
    /// Reads the API key from the configured environment variable; an unset
    /// or empty variable sends no auth header.
    pub fn new(config: EndpointConfig, transport: Arc<dyn Transport>, clock: Arc<dyn Clock>) -> Result<Self, ClientError> {
        config.validate()?;
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(EndpointClient { config, api_key, transport, clock })
    }

    pub fn http(config: EndpointConfig) -> Result<Self, ClientError> {
        let transport = Arc::new(HttpTransport::new(config.timeout()));
        Self::new(config, transport, Arc::new(SystemClock))
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    fn backoff(&self, retry: u32) {
        let ceiling = self.config.backoff_ceiling(retry).as_millis() as u64;
        if ceiling == 0 {
            return;
        }
        let wait = rand::rng().random_range(ceiling / 2..=ceiling);
        self.clock.sleep(Duration::from_millis(wait));
    }

    pub fn query_model(&self, sequence: u64, prompt: &RenderedPrompt) -> Result<ExchangeRecord, ExchangeFailure> {
        let body = ChatRequest::new(prompt, &self.config).body();
        let url = self.config.endpoint_url();
        let started_at_ms = self.clock.wall_ms();
        let start = self.clock.monotonic();
        let mut statuses = Vec::new();
        let mut last: Option<HttpReply> = None;
        let mut last_error = None;

        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                self.backoff(attempt);
            }
            match self.transport.post(&url, &body, self.api_key.as_deref()) {
                Ok(reply) => {
                    statuses.push(reply.status);
                    let again = retryable(reply.status);
                    last = Some(reply);
                    last_error = None;
                    if !again {
                        break;
                    }
                }
                Err(e) => {
                    statuses.push(0);
                    last = None;
                    last_error = Some(e);
                }
            }
        }

        let mut record = ExchangeRecord {
            sequence,
            prompt_ref: prompt.prompt_ref(),
            request_body_digest: sha256_hex(body.as_bytes()),
            request_body: body,
            outcome: ExchangeOutcome::TransportError,
            http_status: last.as_ref().map(|r| r.status),
            attempt_count: statuses.len() as u32,
            attempt_statuses: statuses,
            raw_response_text: None,
            response_body: last.as_ref().map(|r| r.body.clone()),
            error: None,
            api_key_present: self.api_key.is_some(),
            started_at_ms,
            wall_time_ms: self.clock.monotonic().saturating_duration_since(start).as_millis() as u64,
        };

        let result = match &last {
            Some(reply) if (200..300).contains(&reply.status) => extract_content(&reply.body).map(|content| {
                record.outcome = ExchangeOutcome::Ok;
                record.raw_response_text = Some(content);
            }),
            Some(reply) if retryable(reply.status) => Err(ClientError::Exhausted {
                attempts: record.attempt_count,
                last_status: Some(reply.status),
            }),
            Some(reply) => Err(ClientError::Rejected { status: reply.status }),
            None => Err(ClientError::Exhausted { attempts: record.attempt_count, last_status: None }),
        };
        match result {
            Ok(()) => Ok(record),
            Err(error) => {
                if matches!(error, ClientError::Envelope(_)) {
                    record.outcome = ExchangeOutcome::EnvelopeError;
                }
                record.error = Some(match &last_error {
                    Some(e) => format!("{error}: {e}"),
                    None => error.to_string(),
                });
                Err(ExchangeFailure { record: Box::new(record), error })
            }
        }
    }

    /// Answers every prompt, at most `max_in_flight` at a time (one at a time
    /// under [`Exec::Sequential`]). Records come back in prompt order and
    /// failures are kept as records.
    pub fn run_batch(&self, prompts: &[RenderedPrompt], exec: Exec) -> Vec<ExchangeRecord> {
        let one = |i: usize| match self.query_model(i as u64, &prompts[i]) {
            Ok(r) => r,
            Err(f) => *f.record,
        };
        let workers = if exec.is_parallel() { self.config.max_in_flight.min(prompts.len()) } else { 1 };
        if workers <= 1 {
            return (0..prompts.len()).map(one).collect();
        }

        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<ExchangeRecord>>> = Mutex::new(vec![None; prompts.len()]);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= prompts.len() {
                        break;
                    }
                    let record = one(i);
                    slots.lock().expect("slot lock")[i] = Some(record);
                });
            }
        });
        slots
            .into_inner()
            .expect("slot lock")
            .into_iter()
            .map(|r| r.expect("every prompt answered"))
            .collect()
    }
}
