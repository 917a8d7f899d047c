//! Deterministic mock backends: in-process scripted backends for unit tests
//! and a tiny_http server that speaks the published wire schema, logs every
//! request, and can be scripted with failures.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use crate::backends::{
    encode_b64, request_digest, BackendError, ChatBackend, ChatRequest, ChatResponse, ContentPart,
    T2IMode, T2IRequest, T2IResponse, T2iBackend,
};
use crate::model::canonical_json;
use crate::pngio;

// ---------------------------------------------------------------------------
// In-process scripted backends
// ---------------------------------------------------------------------------

enum ChatScript {
    /// Responses consumed in order; `Err(status)` simulates a rejection.
    Sequence(Vec<Result<String, u16>>),
    /// Responses keyed by request digest.
    Keyed(HashMap<String, String>),
}

/// A chat backend driven by a script. Thread-safe; records every request.
pub struct ScriptedChatBackend {
    script: Mutex<ChatScript>,
    cursor: Mutex<usize>,
    log: Mutex<Vec<ChatRequest>>,
}

impl ScriptedChatBackend {
    /// Answer requests in order with the given results.
    pub fn sequence(responses: Vec<Result<String, u16>>) -> Self {
        ScriptedChatBackend {
            script: Mutex::new(ChatScript::Sequence(responses)),
            cursor: Mutex::new(0),
            log: Mutex::new(Vec::new()),
        }
    }

    /// Answer each request by its digest; unknown digests miss.
    pub fn keyed(responses: HashMap<String, String>) -> Self {
        ScriptedChatBackend {
            script: Mutex::new(ChatScript::Keyed(responses)),
            cursor: Mutex::new(0),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> u32 {
        self.log.lock().unwrap().len() as u32
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().unwrap().clone()
    }
}

impl ChatBackend for ScriptedChatBackend {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.log.lock().unwrap().push(req.clone());
        let script = self.script.lock().unwrap();
        match &*script {
            ChatScript::Sequence(responses) => {
                let mut cursor = self.cursor.lock().unwrap();
                let step = responses.get(*cursor).cloned().ok_or_else(|| {
                    BackendError::Other(format!("chat script exhausted at call {}", *cursor + 1))
                })?;
                *cursor += 1;
                match step {
                    Ok(content) => Ok(ChatResponse::of(content)),
                    Err(status) => Err(BackendError::Rejected {
                        status,
                        message: "scripted rejection".into(),
                    }),
                }
            }
            ChatScript::Keyed(map) => {
                let digest = request_digest(req);
                map.get(&digest)
                    .map(|content| ChatResponse::of(content.clone()))
                    .ok_or(BackendError::DigestMiss { digest })
            }
        }
    }
}

/// A T2I backend that renders a flat-color PNG at the requested dimensions.
/// Color steps deterministically per call so successive artifacts differ.
pub struct ScriptedT2iBackend {
    log: Mutex<Vec<T2IRequest>>,
    failures: Mutex<Vec<u16>>,
}

impl ScriptedT2iBackend {
    pub fn new() -> Self {
        ScriptedT2iBackend { log: Mutex::new(Vec::new()), failures: Mutex::new(Vec::new()) }
    }

    /// Reject the next calls with these statuses before serving normally.
    pub fn failing_first(statuses: Vec<u16>) -> Self {
        ScriptedT2iBackend { log: Mutex::new(Vec::new()), failures: Mutex::new(statuses) }
    }

    pub fn calls(&self) -> u32 {
        self.log.lock().unwrap().len() as u32
    }

    pub fn requests(&self) -> Vec<T2IRequest> {
        self.log.lock().unwrap().clone()
    }
}

impl Default for ScriptedT2iBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl T2iBackend for ScriptedT2iBackend {
    fn t2i(&self, req: &T2IRequest) -> Result<T2IResponse, BackendError> {
        let call = {
            let mut log = self.log.lock().unwrap();
            log.push(req.clone());
            log.len() as u8
        };
        {
            let mut failures = self.failures.lock().unwrap();
            if !failures.is_empty() {
                let status = failures.remove(0);
                return Err(BackendError::Rejected { status, message: "scripted rejection".into() });
            }
        }
        let shade = call.wrapping_mul(40);
        let pixels: Vec<u8> =
            std::iter::repeat([shade, 128, 255 - shade])
                .take((req.width * req.height) as usize)
                .flatten()
                .collect();
        let png = pngio::encode_rgb(req.width, req.height, &pixels, &[])
            .map_err(|e| BackendError::Other(e.to_string()))?;
        Ok(T2IResponse { image_b64: encode_b64(&png), seed: req.seed })
    }
}

// ---------------------------------------------------------------------------
// HTTP mock server
// ---------------------------------------------------------------------------

/// One scripted server reaction, consumed in request order. When the script
/// runs out the server falls back to its delegate backend (if any) or a 500.
#[derive(Debug, Clone)]
pub enum MockStep {
    /// Respond with this status and body.
    Respond { status: u16, body: String },
    /// Close the connection without responding (client sees a transport
    /// error).
    DropConnection,
}

/// What the server logged about one request.
#[derive(Debug, Clone)]
pub struct RequestLogEntry {
    pub body: String,
    /// Whether the body parsed and validated against the wire schema.
    pub valid: bool,
    pub violation: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WireKind {
    Chat,
    T2i,
}

enum Delegate {
    None,
    Chat(Arc<dyn ChatBackend>),
    T2i(Arc<dyn T2iBackend>),
}

/// A real localhost HTTP server for exercising the HTTP clients end to end.
/// Validates every request body against the wire schema, answers from the
/// script first, then from the delegate backend.
pub struct MockServer {
    server: Arc<tiny_http::Server>,
    port: u16,
    log: Arc<Mutex<Vec<RequestLogEntry>>>,
    handle: Option<std::thread::JoinHandle<()>>,
    stop: Arc<AtomicBool>,
}

fn validate_body(kind: WireKind, body: &str) -> Result<(), String> {
    match kind {
        WireKind::Chat => {
            let req: ChatRequest = serde_json::from_str(body).map_err(|e| e.to_string())?;
            if req.messages.is_empty() {
                return Err("messages must be non-empty".into());
            }
            if !(0.0..=2.0).contains(&req.temperature) {
                return Err("temperature out of range".into());
            }
            for msg in &req.messages {
                let images =
                    msg.content.iter().filter(|p| matches!(p, ContentPart::Image { .. })).count();
                if images > 1 {
                    return Err("at most one image part per message".into());
                }
            }
            Ok(())
        }
        WireKind::T2i => {
            let req: T2IRequest = serde_json::from_str(body).map_err(|e| e.to_string())?;
            if req.width == 0 || req.height == 0 {
                return Err("width and height must be positive".into());
            }
            if !(0.0..=1.0).contains(&req.strength) {
                return Err("strength out of range".into());
            }
            match req.mode {
                T2IMode::Txt2Img => {
                    if req.init_image_b64.is_some() || req.mask_b64.is_some() {
                        return Err("txt2img takes no init image or mask".into());
                    }
                }
                T2IMode::Img2Img => {
                    if req.init_image_b64.is_none() {
                        return Err("img2img requires an init image".into());
                    }
                    if req.mask_b64.is_some() {
                        return Err("img2img takes no mask".into());
                    }
                }
                T2IMode::Inpaint => {
                    if req.init_image_b64.is_none() || req.mask_b64.is_none() {
                        return Err("inpaint requires init image and mask".into());
                    }
                }
            }
            Ok(())
        }
    }
}

fn delegate_response(delegate: &Delegate, kind: WireKind, body: &str) -> (u16, String) {
    match (delegate, kind) {
        (Delegate::Chat(inner), WireKind::Chat) => {
            let req: ChatRequest = serde_json::from_str(body).expect("validated above");
            match inner.chat(&req) {
                Ok(resp) => (200, canonical_json(&resp)),
                Err(e) => (500, format!("{{\"error\": {}}}", serde_json::json!(e.to_string()))),
            }
        }
        (Delegate::T2i(inner), WireKind::T2i) => {
            let req: T2IRequest = serde_json::from_str(body).expect("validated above");
            match inner.t2i(&req) {
                Ok(resp) => (200, canonical_json(&resp)),
                Err(e) => (500, format!("{{\"error\": {}}}", serde_json::json!(e.to_string()))),
            }
        }
        _ => (500, "{\"error\": \"script exhausted\"}".to_string()),
    }
}

impl MockServer {
    pub fn start(kind: WireKind, steps: Vec<MockStep>) -> Self {
        Self::start_inner("127.0.0.1:0", kind, steps, Delegate::None)
    }

    /// Bind to a specific address (e.g. a fixed port for `serve-mock`).
    pub fn start_on(addr: &str, kind: WireKind, steps: Vec<MockStep>) -> Self {
        Self::start_inner(addr, kind, steps, Delegate::None)
    }

    /// Serve by delegating to an in-process chat backend.
    pub fn start_chat_delegate(inner: Arc<dyn ChatBackend>, steps: Vec<MockStep>) -> Self {
        Self::start_inner("127.0.0.1:0", WireKind::Chat, steps, Delegate::Chat(inner))
    }

    /// Serve by delegating to an in-process T2I backend.
    pub fn start_t2i_delegate(inner: Arc<dyn T2iBackend>, steps: Vec<MockStep>) -> Self {
        Self::start_inner("127.0.0.1:0", WireKind::T2i, steps, Delegate::T2i(inner))
    }

    fn start_inner(addr: &str, kind: WireKind, steps: Vec<MockStep>, delegate: Delegate) -> Self {
        let server = Arc::new(tiny_http::Server::http(addr).expect("bind mock server"));
        let port = match server.server_addr() {
            tiny_http::ListenAddr::IP(addr) => addr.port(),
            _ => unreachable!("tcp listener"),
        };
        let log = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));

        let srv = Arc::clone(&server);
        let log_w = Arc::clone(&log);
        let stop_w = Arc::clone(&stop);
        let handle = std::thread::spawn(move || {
            let mut steps = steps;
            for mut request in srv.incoming_requests() {
                if stop_w.load(Ordering::SeqCst) {
                    break;
                }
                let mut body = String::new();
                let _ = std::io::Read::read_to_string(request.as_reader(), &mut body);
                let validation = validate_body(kind, &body);
                log_w.lock().unwrap().push(RequestLogEntry {
                    body: body.clone(),
                    valid: validation.is_ok(),
                    violation: validation.as_ref().err().cloned(),
                });
                if let Err(violation) = validation {
                    let body = format!("{{\"error\": {}}}", serde_json::json!(violation));
                    let _ = request.respond(json_response(400, &body));
                    continue;
                }
                let (status, body) = if steps.is_empty() {
                    delegate_response(&delegate, kind, &body)
                } else {
                    match steps.remove(0) {
                        MockStep::Respond { status, body } => (status, body),
                        MockStep::DropConnection => {
                            drop(request);
                            continue;
                        }
                    }
                };
                let _ = request.respond(json_response(status, &body));
            }
        });

        MockServer { server, port, log, handle: Some(handle), stop }
    }

    pub fn url(&self) -> String {
        format!("http://127.0.0.1:{}/", self.port)
    }

    pub fn log(&self) -> Vec<RequestLogEntry> {
        self.log.lock().unwrap().clone()
    }

    pub fn request_count(&self) -> usize {
        self.log.lock().unwrap().len()
    }
}

fn json_response(status: u16, body: &str) -> tiny_http::Response<std::io::Cursor<Vec<u8>>> {
    tiny_http::Response::from_string(body)
        .with_status_code(status)
        .with_header(
            tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).unwrap(),
        )
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.server.unblock();
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::ChatMessage;

    fn chat_req() -> ChatRequest {
        ChatRequest {
            model: "m".into(),
            messages: vec![ChatMessage::text("user", "hello")],
            temperature: 0.0,
            max_tokens: 16,
        }
    }

    #[test]
    fn sequence_backend_replays_in_order_and_logs() {
        let chat = ScriptedChatBackend::sequence(vec![Ok("a".into()), Err(429)]);
        assert_eq!(chat.chat(&chat_req()).unwrap().content, "a");
        assert!(matches!(
            chat.chat(&chat_req()),
            Err(BackendError::Rejected { status: 429, .. })
        ));
        assert_eq!(chat.calls(), 2);
        assert_eq!(chat.requests().len(), 2);
    }

    #[test]
    fn keyed_backend_misses_on_unknown_digest() {
        let req = chat_req();
        let mut map = HashMap::new();
        map.insert(request_digest(&req), "hi".to_string());
        let chat = ScriptedChatBackend::keyed(map);
        assert_eq!(chat.chat(&req).unwrap().content, "hi");
        let mut other = chat_req();
        other.max_tokens = 17;
        assert!(matches!(chat.chat(&other), Err(BackendError::DigestMiss { .. })));
    }

    #[test]
    fn scripted_t2i_honors_requested_dimensions() {
        let t2i = ScriptedT2iBackend::new();
        let req = T2IRequest {
            mode: T2IMode::Txt2Img,
            prompt: "x".into(),
            negative_prompt: String::new(),
            seed: 1,
            strength: 0.0,
            width: 24,
            height: 16,
            init_image_b64: None,
            mask_b64: None,
            extensions: Default::default(),
        };
        let resp = t2i.t2i(&req).unwrap();
        let png = crate::backends::decode_b64(&resp.image_b64).unwrap();
        assert_eq!(pngio::probe_dimensions(&png).unwrap(), (24, 16));
        assert_eq!(resp.seed, 1);
    }

    #[test]
    fn server_validates_the_wire_schema() {
        let server = MockServer::start(
            WireKind::Chat,
            vec![MockStep::Respond { status: 200, body: "{}".into() }],
        );
        let resp = ureq::post(&server.url())
            .set("Content-Type", "application/json")
            .send_string("{\"model\": \"m\"}");
        match resp {
            Err(ureq::Error::Status(400, _)) => {}
            other => panic!("expected 400, got {other:?}"),
        }
        let log = server.log();
        assert_eq!(log.len(), 1);
        assert!(!log[0].valid);
        assert!(log[0].violation.is_some());
    }

    #[test]
    fn server_scripts_failures_then_recovers() {
        let ok = canonical_json(&ChatResponse::of("fine"));
        let server = MockServer::start(
            WireKind::Chat,
            vec![
                MockStep::Respond { status: 503, body: "{\"error\": \"down\"}".into() },
                MockStep::Respond { status: 200, body: ok },
            ],
        );
        let endpoint = crate::backends::HttpEndpoint {
            url: server.url(),
            bearer_token: None,
            policy: crate::backends::RetryPolicy {
                base_delay_ms: 1,
                ..crate::backends::RetryPolicy::default()
            },
        };
        let backend = crate::backends::HttpChatBackend { endpoint };
        let resp = backend.chat(&chat_req()).unwrap();
        assert_eq!(resp.content, "fine");
        assert_eq!(server.request_count(), 2);
    }

    #[test]
    fn dropped_connection_is_retried_as_transport_error() {
        let ok = canonical_json(&ChatResponse::of("recovered"));
        let server = MockServer::start(
            WireKind::Chat,
            vec![MockStep::DropConnection, MockStep::Respond { status: 200, body: ok }],
        );
        let endpoint = crate::backends::HttpEndpoint {
            url: server.url(),
            bearer_token: None,
            policy: crate::backends::RetryPolicy {
                base_delay_ms: 1,
                ..crate::backends::RetryPolicy::default()
            },
        };
        let backend = crate::backends::HttpChatBackend { endpoint };
        assert_eq!(backend.chat(&chat_req()).unwrap().content, "recovered");
    }

    #[test]
    fn client_gives_up_after_three_5xx() {
        let step = MockStep::Respond { status: 500, body: "{\"error\": \"x\"}".into() };
        let server =
            MockServer::start(WireKind::Chat, vec![step.clone(), step.clone(), step.clone()]);
        let endpoint = crate::backends::HttpEndpoint {
            url: server.url(),
            bearer_token: None,
            policy: crate::backends::RetryPolicy {
                base_delay_ms: 1,
                ..crate::backends::RetryPolicy::default()
            },
        };
        let backend = crate::backends::HttpChatBackend { endpoint };
        assert!(matches!(
            backend.chat(&chat_req()),
            Err(BackendError::Exhausted { attempts: 3, .. })
        ));
        assert_eq!(server.request_count(), 3);
    }

    #[test]
    fn client_does_not_retry_4xx() {
        let server = MockServer::start(
            WireKind::Chat,
            vec![MockStep::Respond { status: 422, body: "{\"error\": \"no\"}".into() }],
        );
        let endpoint = crate::backends::HttpEndpoint {
            url: server.url(),
            bearer_token: None,
            policy: crate::backends::RetryPolicy {
                base_delay_ms: 1,
                ..crate::backends::RetryPolicy::default()
            },
        };
        let backend = crate::backends::HttpChatBackend { endpoint };
        assert!(matches!(
            backend.chat(&chat_req()),
            Err(BackendError::Rejected { status: 422, .. })
        ));
        assert_eq!(server.request_count(), 1);
    }
}
