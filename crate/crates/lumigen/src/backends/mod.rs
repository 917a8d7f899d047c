//! Backend wire protocol: chat (LVLM) and T2I request/response types, the
//! retry policy, and HTTP clients for live endpoints.

pub mod mock;
pub mod sim;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Dimension, Keypoint};

// ---------------------------------------------------------------------------
// Chat protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    /// Base64 PNG image content.
    Image { data_b64: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn text(role: &str, text: impl Into<String>) -> Self {
        ChatMessage { role: role.into(), content: vec![ContentPart::Text { text: text.into() }] }
    }

    pub fn joined_text(&self) -> String {
        self.content
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text { text } => Some(text.as_str()),
                ContentPart::Image { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish_reason: String,
    pub usage: Usage,
}

impl ChatResponse {
    pub fn of(content: impl Into<String>) -> Self {
        ChatResponse {
            content: content.into(),
            finish_reason: "stop".into(),
            usage: Usage { prompt_tokens: 0, completion_tokens: 0 },
        }
    }
}

// ---------------------------------------------------------------------------
// T2I protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum T2IMode {
    Txt2Img,
    Img2Img,
    Inpaint,
}

/// Opaque extension payload: pose and attention conditioning plus the
/// dimensions the compiled signals were derived from. Backends may ignore it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct T2IExtensions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<PoseExtension>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attention_hints: Vec<AttentionExtension>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub targeted_dimensions: Vec<Dimension>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseExtension {
    pub keypoints: Vec<Keypoint>,
    pub directive: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExtension {
    pub dimension: Dimension,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T2IRequest {
    pub mode: T2IMode,
    pub prompt: String,
    #[serde(default)]
    pub negative_prompt: String,
    pub seed: u64,
    pub strength: f64,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_image_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_b64: Option<String>,
    #[serde(default)]
    pub extensions: T2IExtensions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T2IResponse {
    pub image_b64: String,
    pub seed: u64,
}

/// Digest of a request's canonical JSON; keys the response store and the
/// scripted mocks.
pub fn request_digest<T: Serialize>(req: &T) -> String {
    let json = crate::model::canonical_json(req);
    let hash = Sha256::digest(json.as_bytes());
    hex_encode(&hash)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex_encode(&Sha256::digest(bytes))
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Backend traits
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Exhausted { attempts: u32, message: String },
    #[error("request rejected (status {status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("malformed response body: {0}")]
    MalformedResponse(String),
    #[error("no recorded response for request digest {digest}")]
    DigestMiss { digest: String },
    #[error("recorded response tampered for digest {digest}")]
    Tampered { digest: String },
    #[error("{0}")]
    Other(String),
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

pub trait T2iBackend: Send + Sync {
    fn t2i(&self, req: &T2IRequest) -> Result<T2IResponse, BackendError>;
}

// ---------------------------------------------------------------------------
// Retry policy
// ---------------------------------------------------------------------------

/// Exponential backoff with full jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub base_delay_ms: u64,
    pub factor: f64,
    pub max_attempts: u32,
    pub attempt_timeout_secs: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { base_delay_ms: 500, factor: 2.0, max_attempts: 3, attempt_timeout_secs: 120 }
    }
}

impl RetryPolicy {
    /// Backoff before attempt `n + 1`, before jitter is applied.
    /// Non-decreasing in `n`.
    pub fn pre_jitter_delay_ms(&self, n: u32) -> u64 {
        (self.base_delay_ms as f64 * self.factor.powi(n as i32)) as u64
    }
}

#[derive(Debug, Clone)]
pub struct AttemptFailure {
    pub retryable: bool,
    pub status: Option<u16>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttemptRecord {
    pub attempt: u32,
    pub outcome: String,
    /// Planned backoff before the next attempt (pre-jitter); `None` on the
    /// final attempt.
    pub pre_jitter_delay_ms: Option<u64>,
}

/// Run `op` under the retry policy. Returns the value and the attempt log.
pub fn with_retry<T>(
    policy: &RetryPolicy,
    mut op: impl FnMut(u32) -> Result<T, AttemptFailure>,
) -> (Result<T, BackendError>, Vec<AttemptRecord>) {
    use rand::Rng;
    let mut log = Vec::new();
    for attempt in 0..policy.max_attempts {
        match op(attempt) {
            Ok(value) => {
                log.push(AttemptRecord {
                    attempt,
                    outcome: "ok".into(),
                    pre_jitter_delay_ms: None,
                });
                return (Ok(value), log);
            }
            Err(failure) if !failure.retryable => {
                log.push(AttemptRecord {
                    attempt,
                    outcome: failure.message.clone(),
                    pre_jitter_delay_ms: None,
                });
                let status = failure.status.unwrap_or(0);
                return (
                    Err(BackendError::Rejected { status, message: failure.message }),
                    log,
                );
            }
            Err(failure) => {
                let last = attempt + 1 == policy.max_attempts;
                let delay = if last { None } else { Some(policy.pre_jitter_delay_ms(attempt)) };
                log.push(AttemptRecord {
                    attempt,
                    outcome: failure.message.clone(),
                    pre_jitter_delay_ms: delay,
                });
                if last {
                    return (
                        Err(BackendError::Exhausted {
                            attempts: policy.max_attempts,
                            message: failure.message,
                        }),
                        log,
                    );
                }
                // Full jitter: sleep uniformly in [0, pre_jitter_delay].
                let delay = delay.unwrap();
                if delay > 0 {
                    let jittered = rand::thread_rng().gen_range(0..=delay);
                    std::thread::sleep(std::time::Duration::from_millis(jittered));
                }
            }
        }
    }
    unreachable!("max_attempts must be > 0")
}

// ---------------------------------------------------------------------------
// HTTP clients
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct HttpEndpoint {
    pub url: String,
    pub bearer_token: Option<String>,
    pub policy: RetryPolicy,
}

impl HttpEndpoint {
    pub fn new(url: impl Into<String>) -> Self {
        HttpEndpoint { url: url.into(), bearer_token: None, policy: RetryPolicy::default() }
    }

    fn post_json(&self, body: &str) -> Result<String, BackendError> {
        let agent = ureq::AgentBuilder::new()
            .timeout(std::time::Duration::from_secs(self.policy.attempt_timeout_secs))
            .build();
        let (result, _log) = with_retry(&self.policy, |_attempt| {
            let mut req = agent.post(&self.url).set("Content-Type", "application/json");
            if let Some(token) = &self.bearer_token {
                req = req.set("Authorization", &format!("Bearer {token}"));
            }
            match req.send_string(body) {
                Ok(resp) => resp.into_string().map_err(|e| AttemptFailure {
                    retryable: true,
                    status: None,
                    message: format!("read body: {e}"),
                }),
                Err(ureq::Error::Status(status, resp)) => {
                    let message = resp
                        .into_string()
                        .unwrap_or_else(|_| String::from("<unreadable body>"));
                    Err(AttemptFailure {
                        retryable: status >= 500,
                        status: Some(status),
                        message: format!("status {status}: {message}"),
                    })
                }
                Err(ureq::Error::Transport(t)) => Err(AttemptFailure {
                    retryable: true,
                    status: None,
                    message: format!("transport: {t}"),
                }),
            }
        });
        result
    }
}

pub struct HttpChatBackend {
    pub endpoint: HttpEndpoint,
}

impl ChatBackend for HttpChatBackend {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let body = crate::model::canonical_json(req);
        let text = self.endpoint.post_json(&body)?;
        serde_json::from_str(&text).map_err(|e| BackendError::MalformedResponse(e.to_string()))
    }
}

pub struct HttpT2iBackend {
    pub endpoint: HttpEndpoint,
}

impl T2iBackend for HttpT2iBackend {
    fn t2i(&self, req: &T2IRequest) -> Result<T2IResponse, BackendError> {
        let body = crate::model::canonical_json(req);
        let text = self.endpoint.post_json(&body)?;
        let resp: T2IResponse = serde_json::from_str(&text)
            .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        // Response images must come back at the requested dimensions.
        let png = crate::backends::decode_b64(&resp.image_b64)?;
        let (w, h) = crate::pngio::probe_dimensions(&png)
            .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        if (w, h) != (req.width, req.height) {
            return Err(BackendError::MalformedResponse(format!(
                "image dimensions {w}x{h} differ from requested {}x{}",
                req.width, req.height
            )));
        }
        Ok(resp)
    }
}

pub fn encode_b64(bytes: &[u8]) -> String {
    use base64::Engine;
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn decode_b64(text: &str) -> Result<Vec<u8>, BackendError> {
    use base64::Engine;
    base64::engine::general_purpose::STANDARD
        .decode(text)
        .map_err(|e| BackendError::MalformedResponse(format!("base64: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pre_jitter_delays_are_non_decreasing() {
        let policy = RetryPolicy::default();
        let delays: Vec<u64> = (0..5).map(|n| policy.pre_jitter_delay_ms(n)).collect();
        assert_eq!(delays, [500, 1000, 2000, 4000, 8000]);
        assert!(delays.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn retry_succeeds_after_two_retryable_failures() {
        let policy = RetryPolicy { base_delay_ms: 1, ..RetryPolicy::default() };
        let mut calls = 0u32;
        let (result, log) = with_retry(&policy, |_| {
            calls += 1;
            if calls < 3 {
                Err(AttemptFailure { retryable: true, status: Some(500), message: "boom".into() })
            } else {
                Ok(42)
            }
        });
        assert_eq!(result.unwrap(), 42);
        assert_eq!(calls, 3);
        let delays: Vec<u64> = log.iter().filter_map(|a| a.pre_jitter_delay_ms).collect();
        assert!(delays.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn fatal_failure_stops_after_one_attempt() {
        let policy = RetryPolicy { base_delay_ms: 1, ..RetryPolicy::default() };
        let mut calls = 0u32;
        let (result, _) = with_retry::<u32>(&policy, |_| {
            calls += 1;
            Err(AttemptFailure { retryable: false, status: Some(400), message: "bad".into() })
        });
        assert!(matches!(result, Err(BackendError::Rejected { status: 400, .. })));
        assert_eq!(calls, 1);
    }

    #[test]
    fn exhausted_after_exactly_three_attempts() {
        let policy = RetryPolicy { base_delay_ms: 1, ..RetryPolicy::default() };
        let mut calls = 0u32;
        let (result, log) = with_retry::<u32>(&policy, |_| {
            calls += 1;
            Err(AttemptFailure { retryable: true, status: Some(503), message: "down".into() })
        });
        assert!(matches!(result, Err(BackendError::Exhausted { attempts: 3, .. })));
        assert_eq!(calls, 3);
        assert_eq!(log.len(), 3);
    }

    #[test]
    fn request_digest_is_stable_for_equal_requests() {
        let req = ChatRequest {
            model: "m".into(),
            messages: vec![ChatMessage::text("user", "hi")],
            temperature: 0.0,
            max_tokens: 16,
        };
        assert_eq!(request_digest(&req), request_digest(&req.clone()));
    }
}
