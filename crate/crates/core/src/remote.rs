//! JSON-over-HTTP clients for model servers: generation, re-ranking, answer
//! judging, passage annotation and text embedding.
//!
//! All clients share a [`Transport`] that caps in-flight requests and retries
//! connection failures and 5xx/429 responses with exponential backoff. Other
//! 4xx responses are not retried.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backend::{control_vocabulary, BackendError, GenerationRequest, GenerationResult, GenerativeBackend};
use crate::engine::{RerankError, Reranker};
use crate::eval::judge::{render_judge_prompt, AnswerJudge, JudgeError};
use crate::forge::{AnnotateError, PassageAnnotator};
use crate::index::{EmbedError, TextEmbedder};
use crate::kb::Passage;
use crate::sample::QuerySample;

/// Overrides the configured endpoint when set.
pub const ENDPOINT_ENV: &str = "REFLECTIVA_ENDPOINT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    /// Base URL, e.g. `http://127.0.0.1:8080`.
    pub endpoint: String,
    pub timeout_secs: f64,
    /// Retries after the first attempt.
    pub retries: u32,
    pub max_inflight: usize,
    pub backoff_ms: u64,
    /// Control tokens the server declares; defaults to the full set.
    pub control_tokens: Option<Vec<String>>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080".into(),
            timeout_secs: 60.0,
            retries: 3,
            max_inflight: 8,
            backoff_ms: 200,
            control_tokens: None,
        }
    }
}

impl RemoteConfig {
    /// Apply the `REFLECTIVA_ENDPOINT` override.
    pub fn with_env_override(mut self) -> Self {
        if let Ok(e) = std::env::var(ENDPOINT_ENV) {
            if !e.trim().is_empty() {
                self.endpoint = e.trim().to_string();
            }
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransportError {
    #[error("unreachable after {attempts} attempt(s): {message}")]
    Unreachable { attempts: u32, message: String },
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Decode(String),
}

pub struct Transport {
    agent: ureq::Agent,
    config: RemoteConfig,
    inflight: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Transport);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.inflight.lock().unwrap_or_else(|e| e.into_inner()) -= 1;
        self.0.freed.notify_one();
    }
}

impl Transport {
    pub fn new(config: RemoteConfig) -> Self {
        let agent_config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs.max(0.001))))
            .http_status_as_error(false)
            .build();
        Self { agent: ureq::Agent::new_with_config(agent_config), config, inflight: Mutex::new(0), freed: Condvar::new() }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn acquire(&self) -> Permit<'_> {
        let cap = self.config.max_inflight.max(1);
        let mut n = self.inflight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= cap {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit(self)
    }

    /// POST `body` as JSON to `path` and decode the JSON reply.
    pub fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp, TransportError> {
        let url = format!("{}{}", self.config.endpoint.trim_end_matches('/'), path);
        let _permit = self.acquire();
        let attempts = self.config.retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                thread::sleep(Duration::from_millis(delay));
            }
            match self.agent.post(&url).send_json(body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if (200..300).contains(&status) {
                        return resp.body_mut().read_json::<Resp>().map_err(|e| TransportError::Decode(e.to_string()));
                    }
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    if status >= 500 || status == 429 {
                        last = format!("HTTP {status}: {text}");
                        log::warn!("{url}: attempt {} failed: {last}", attempt + 1);
                        continue;
                    }
                    return Err(TransportError::Status { status, body: text });
                }
                Err(e) => {
                    last = e.to_string();
                    log::warn!("{url}: attempt {} failed: {last}", attempt + 1);
                }
            }
        }
        Err(TransportError::Unreachable { attempts, message: last })
    }
}

fn backend_error(e: TransportError) -> BackendError {
    match e {
        TransportError::Unreachable { attempts, message } => BackendError::Transport { attempts, message },
        TransportError::Status { status, body } => BackendError::InvalidRequest(format!("server rejected request: HTTP {status}: {body}")),
        TransportError::Decode(m) => BackendError::ProtocolViolation(format!("malformed response: {m}")),
    }
}

/// Generation over `POST /v1/generate`.
pub struct RemoteBackend {
    transport: Transport,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        Self { transport: Transport::new(config) }
    }
}

impl GenerativeBackend for RemoteBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        self.transport.post("/v1/generate", request).map_err(backend_error)
    }

    fn control_tokens(&self) -> Vec<String> {
        self.transport.config.control_tokens.clone().unwrap_or_else(control_vocabulary)
    }
}

#[derive(Serialize)]
struct RerankRequest<'a> {
    question: &'a str,
    passages: Vec<&'a str>,
}

#[derive(Deserialize)]
struct RerankResponse {
    order: Vec<usize>,
}

/// Passage re-ranking over `POST /v1/rerank`; the service replies with the new
/// order as indices into the request's passages.
pub struct RemoteReranker {
    transport: Transport,
}

impl RemoteReranker {
    pub fn new(config: RemoteConfig) -> Self {
        Self { transport: Transport::new(config) }
    }
}

impl Reranker for RemoteReranker {
    fn rerank(&self, question: &str, passages: &[Passage]) -> Result<Vec<Passage>, RerankError> {
        let req = RerankRequest { question, passages: passages.iter().map(|p| p.text.as_str()).collect() };
        let resp: RerankResponse = self.transport.post("/v1/rerank", &req).map_err(|e| RerankError::Service(e.to_string()))?;
        resp.order
            .into_iter()
            .map(|i| passages.get(i).cloned().ok_or_else(|| RerankError::Service(format!("index {i} out of range"))))
            .collect()
    }
}

#[derive(Serialize)]
struct JudgeRequest<'a> {
    prompt: String,
    question: &'a str,
    caption: &'a str,
    ground_truth: &'a str,
    predicted: &'a str,
}

#[derive(Debug, Deserialize)]
struct JudgeVerdict {
    score: f64,
    #[allow(dead_code)]
    #[serde(default)]
    reason: String,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum JudgeResponse {
    One(JudgeVerdict),
    Many(Vec<JudgeVerdict>),
}

/// LLM answer judge over `POST /v1/judge`, scoring 0–100 (reported as 0–1).
pub struct RemoteJudge {
    transport: Transport,
}

impl RemoteJudge {
    pub fn new(config: RemoteConfig) -> Self {
        Self { transport: Transport::new(config) }
    }
}

impl AnswerJudge for RemoteJudge {
    fn judge(&self, sample: &QuerySample, prediction: &str) -> Result<f64, JudgeError> {
        let caption = sample.captions.first().map(String::as_str).unwrap_or("");
        let gt = sample.primary_answer().unwrap_or("");
        let req = JudgeRequest {
            prompt: render_judge_prompt(&sample.question, caption, gt, prediction),
            question: &sample.question,
            caption,
            ground_truth: gt,
            predicted: prediction,
        };
        let resp: JudgeResponse = self.transport.post("/v1/judge", &req).map_err(|e| JudgeError::Service(e.to_string()))?;
        let score = match resp {
            JudgeResponse::One(v) => v.score,
            JudgeResponse::Many(v) => v.first().map(|v| v.score).ok_or_else(|| JudgeError::Service("empty verdict list".into()))?,
        };
        if !(0.0..=100.0).contains(&score) {
            return Err(JudgeError::OutOfRange(score));
        }
        Ok(score / 100.0)
    }

    fn name(&self) -> &str {
        "remote_judge"
    }
}

/// Instruction for the remote passage annotator. This wording is local to
/// this project.
pub const ANNOTATOR_INSTRUCTION: &str = "Decide whether the passage contains the information needed to answer the question about the image described by the captions. Reply with JSON {\"relevant\": true} or {\"relevant\": false}.";

#[derive(Serialize)]
struct AnnotateRequest<'a> {
    instruction: &'static str,
    question: &'a str,
    captions: &'a [String],
    answers: &'a [String],
    passage: &'a str,
}

#[derive(Deserialize)]
struct AnnotateResponse {
    relevant: bool,
}

/// Passage annotation over `POST /v1/annotate`.
pub struct RemoteAnnotator {
    transport: Transport,
}

impl RemoteAnnotator {
    pub fn new(config: RemoteConfig) -> Self {
        Self { transport: Transport::new(config) }
    }
}

impl PassageAnnotator for RemoteAnnotator {
    fn is_relevant(&self, sample: &QuerySample, passage: &Passage) -> Result<bool, AnnotateError> {
        let req = AnnotateRequest {
            instruction: ANNOTATOR_INSTRUCTION,
            question: &sample.question,
            captions: &sample.captions,
            answers: &sample.gold_answers,
            passage: &passage.text,
        };
        self.transport
            .post::<_, AnnotateResponse>("/v1/annotate", &req)
            .map(|r| r.relevant)
            .map_err(|e| AnnotateError(e.to_string()))
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embedding: Vec<f32>,
}

/// Text embeddings over `POST /v1/embed`.
pub struct RemoteEmbedder {
    transport: Transport,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteConfig) -> Self {
        Self { transport: Transport::new(config) }
    }
}

impl TextEmbedder for RemoteEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        self.transport
            .post::<_, EmbedResponse>("/v1/embed", &EmbedRequest { text })
            .map(|r| r.embedding)
            .map_err(|e| EmbedError::Remote(e.to_string()))
    }
}

/// A minimal HTTP/1.1 server for exercising the clients in tests: every
/// request is answered by a handler `(path, body) -> (status, body)`.
pub mod stub {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::{TcpListener, TcpStream};
    use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
    use std::sync::Arc;
    use std::thread::JoinHandle;

    type Handler = dyn Fn(&str, &str) -> (u16, String) + Send + Sync;

    pub struct StubServer {
        addr: String,
        stop: Arc<AtomicBool>,
        hits: Arc<AtomicUsize>,
        handle: Option<JoinHandle<()>>,
    }

    impl StubServer {
        pub fn start(handler: impl Fn(&str, &str) -> (u16, String) + Send + Sync + 'static) -> std::io::Result<Self> {
            let listener = TcpListener::bind("127.0.0.1:0")?;
            let addr = format!("http://{}", listener.local_addr()?);
            listener.set_nonblocking(true)?;
            let stop = Arc::new(AtomicBool::new(false));
            let hits = Arc::new(AtomicUsize::new(0));
            let handler: Arc<Handler> = Arc::new(handler);
            let (s, h) = (stop.clone(), hits.clone());
            let handle = std::thread::spawn(move || {
                while !s.load(Ordering::Relaxed) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            let handler = handler.clone();
                            let h = h.clone();
                            std::thread::spawn(move || {
                                let _ = serve(stream, &*handler, &h);
                            });
                        }
                        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                            std::thread::sleep(std::time::Duration::from_millis(2));
                        }
                        Err(_) => break,
                    }
                }
            });
            Ok(Self { addr, stop, hits, handle: Some(handle) })
        }

        /// Base URL, e.g. `http://127.0.0.1:40123`.
        pub fn url(&self) -> &str {
            &self.addr
        }

        pub fn requests(&self) -> usize {
            self.hits.load(Ordering::SeqCst)
        }
    }

    impl Drop for StubServer {
        fn drop(&mut self) {
            self.stop.store(true, Ordering::Relaxed);
            if let Some(h) = self.handle.take() {
                let _ = h.join();
            }
        }
    }

    fn serve(stream: TcpStream, handler: &Handler, hits: &AtomicUsize) -> std::io::Result<()> {
        stream.set_nonblocking(false)?;
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut request_line = String::new();
        reader.read_line(&mut request_line)?;
        let path = request_line.split_whitespace().nth(1).unwrap_or("/").to_string();
        let mut len = 0usize;
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 || line == "\r\n" || line == "\n" {
                break;
            }
            if let Some((k, v)) = line.split_once(':') {
                if k.trim().eq_ignore_ascii_case("content-length") {
                    len = v.trim().parse().unwrap_or(0);
                }
            }
        }
        let mut body = vec![0u8; len];
        reader.read_exact(&mut body)?;
        hits.fetch_add(1, Ordering::SeqCst);
        let (status, reply) = handler(&path, &String::from_utf8_lossy(&body));
        let mut stream = stream;
        write!(
            stream,
            "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
            reply.len()
        )?;
        stream.flush()
    }
}
