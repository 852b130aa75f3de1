//! Typed clients for the external model roles over one JSON contract.
//!
//! Every call is a `POST {base}/v1/<role>` with a JSON body. Requests are
//! built here, sent through a [`Backend`] (HTTP or fixture-backed mock), and
//! the replies are parsed into the types of [`types`].

mod http;
mod mock;
pub mod types;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::Duration;

use image::RgbImage;
use serde_json::{json, Value};
use thiserror::Error;

use crate::geometry::Box2D;
use crate::mask::RleMask;
use crate::prompts;
use crate::raster::encode_png_b64;

pub use http::HttpBackend;
pub use mock::{canonical_json, default_response, request_key, FixtureBackend, FnBackend, RecordingBackend};
pub use types::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Parser,
    Embedder,
    Segmenter,
    /// Stage 1-3 point prompting VLM.
    Pointer,
    /// Final multiple-choice VLM.
    Reasoner,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::Parser,
        Role::Embedder,
        Role::Segmenter,
        Role::Pointer,
        Role::Reasoner,
    ];

    /// Name used in fixture keys and files.
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Parser => "parser",
            Role::Embedder => "embedder",
            Role::Segmenter => "segmenter",
            Role::Pointer => "pointer",
            Role::Reasoner => "vlm",
        }
    }

    /// Last path segment of the endpoint, `/v1/<path>`.
    pub fn path(self) -> &'static str {
        match self {
            Role::Pointer | Role::Reasoner => "vlm",
            other => other.as_str(),
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    /// Connection-level failure; retried with backoff.
    #[error("transport: {0}")]
    Transport(String),
    #[error("HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl BackendError {
    fn retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            BackendError::Malformed(_) => false,
        }
    }
}

/// Sends one request for a role and returns the JSON reply.
pub trait Backend: Send + Sync {
    fn call(&self, role: Role, request: &Value) -> Result<Value, BackendError>;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("{role} service error: {message}")]
    Service { role: Role, message: String },
    #[error("{role} reply could not be parsed: {message}")]
    ParseFailure { role: Role, message: String },
    #[error("embedding dimension changed from {expected} to {got}")]
    DimensionDrift { expected: usize, got: usize },
    #[error("point ({u}, {v}) outside {width}x{height} image")]
    OutOfBoundsPoint { u: f64, v: f64, width: u32, height: u32 },
    #[error("no usable choice: {0}")]
    RefusalOrExhausted(String),
    #[error("configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Extra attempts after a reply fails to parse.
    pub parse_retries: u32,
    /// Reprompts per failure class in the choice protocol.
    pub reprompt_retries: u32,
    pub transport_attempts: u32,
    /// Sleep before the 2nd, 3rd, ... transport attempt; the last entry repeats.
    pub backoff: Vec<Duration>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            parse_retries: 1,
            reprompt_retries: 2,
            transport_attempts: 3,
            backoff: vec![Duration::from_millis(500), Duration::from_secs(1)],
        }
    }
}

impl RetryPolicy {
    /// Same budgets without any sleeping.
    pub fn no_backoff() -> Self {
        Self {
            backoff: Vec::new(),
            ..Self::default()
        }
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// One message of the choice conversation.
#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub role: &'static str,
    pub text: String,
    /// Number of images attached after the text.
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceSession {
    pub result: ChoiceResult,
    /// Reprompts sent before the accepted answer.
    pub reprompts: u32,
    pub turns: Vec<Turn>,
}

pub const DEFAULT_IN_FLIGHT: usize = 4;

/// Shareable client for all model roles.
pub struct ModelClients {
    backend: Arc<dyn Backend>,
    policy: RetryPolicy,
    gate: Semaphore,
    embed_dim: OnceLock<usize>,
    requests: AtomicU64,
}

impl ModelClients {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self::with_policy(backend, RetryPolicy::default(), DEFAULT_IN_FLIGHT)
    }

    pub fn with_policy(backend: Arc<dyn Backend>, policy: RetryPolicy, in_flight: usize) -> Self {
        Self {
            backend,
            policy,
            gate: Semaphore::new(in_flight),
            embed_dim: OnceLock::new(),
            requests: AtomicU64::new(0),
        }
    }

    /// Builds clients from `MCM_BACKEND` and the `MCM_*_URL` variables.
    pub fn from_env() -> Result<Self, ClientError> {
        Ok(Self::new(backend_from_env()?))
    }

    pub fn policy(&self) -> &RetryPolicy {
        &self.policy
    }

    /// Requests sent so far, including retries.
    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    fn send(&self, role: Role, request: &Value) -> Result<Value, ClientError> {
        let _permit = self.gate.acquire();
        let attempts = self.policy.transport_attempts.max(1);
        let mut last = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                let i = (attempt as usize - 1).min(self.policy.backoff.len().saturating_sub(1));
                if let Some(d) = self.policy.backoff.get(i) {
                    std::thread::sleep(*d);
                }
            }
            self.requests.fetch_add(1, Ordering::Relaxed);
            match self.backend.call(role, request) {
                Ok(v) => return Ok(v),
                Err(e) if e.retryable() => {
                    log::warn!("{role} attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                }
                Err(e) => {
                    return Err(ClientError::Service { role, message: e.to_string() });
                }
            }
        }
        Err(ClientError::Service {
            role,
            message: last.map(|e| e.to_string()).unwrap_or_default(),
        })
    }

    fn send_text(&self, role: Role, request: &Value) -> Result<String, ClientError> {
        let reply = self.send(role, request)?;
        reply
            .get("text")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| ClientError::Service {
                role,
                message: "reply has no string 'text'".into(),
            })
    }

    /// Sends `make(attempt)` and parses the reply, retrying on parse failure.
    fn ask_parsed<R>(
        &self,
        role: Role,
        make: impl Fn(u32) -> Value,
        parse: impl Fn(&str) -> Result<R, String>,
    ) -> Result<R, ClientError> {
        let mut message = String::new();
        for attempt in 0..=self.policy.parse_retries {
            let text = self.send_text(role, &make(attempt))?;
            match parse(&text) {
                Ok(r) => return Ok(r),
                Err(e) => {
                    log::debug!("{role} parse failure on attempt {attempt}: {e}");
                    message = e;
                }
            }
        }
        Err(ClientError::ParseFailure { role, message })
    }

    pub fn parse_query(&self, query: &str, categories: &[String]) -> Result<QueryParse, ClientError> {
        if query.trim().is_empty() {
            return Err(ClientError::InvalidInput("empty query".into()));
        }
        if categories.is_empty() {
            return Err(ClientError::InvalidInput("empty category list".into()));
        }
        let prompt = prompts::category_parsing(query, categories);
        self.ask_parsed(
            Role::Parser,
            |attempt| json!({"attempt": attempt, "prompt": prompt, "query": query, "categories": categories}),
            |text| {
                let p = parse_query_reply(text, query)?;
                p.validate(categories)?;
                Ok(p)
            },
        )
    }

    fn embed(&self, request: Value) -> Result<Embedding, ClientError> {
        let role = Role::Embedder;
        let reply = self.send(role, &request)?;
        let values: Vec<f64> = reply
            .get("embedding")
            .and_then(Value::as_array)
            .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<_>>>())
            .ok_or_else(|| ClientError::Service {
                role,
                message: "reply has no numeric 'embedding' array".into(),
            })?;
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(ClientError::Service {
                role,
                message: "embedding is empty or not finite".into(),
            });
        }
        let expected = *self.embed_dim.get_or_init(|| values.len());
        if expected != values.len() {
            return Err(ClientError::DimensionDrift { expected, got: values.len() });
        }
        Ok(Embedding(values))
    }

    pub fn embed_text(&self, text: &str) -> Result<Embedding, ClientError> {
        if text.trim().is_empty() {
            return Err(ClientError::InvalidInput("empty text".into()));
        }
        self.embed(json!({"kind": "text", "text": text}))
    }

    pub fn embed_image(&self, crop: &RgbImage) -> Result<Embedding, ClientError> {
        if crop.width() == 0 || crop.height() == 0 {
            return Err(ClientError::InvalidInput("empty image".into()));
        }
        self.embed(json!({"kind": "image", "image": encode_png_b64(crop)}))
    }

    pub fn segment_by_text(&self, image: &RgbImage, text: &str) -> Result<Vec<Detection2D>, ClientError> {
        if text.trim().is_empty() {
            return Err(ClientError::InvalidInput("empty text prompt".into()));
        }
        let req = json!({"mode": "text", "image": encode_png_b64(image), "text": text});
        let reply = self.send(Role::Segmenter, &req)?;
        parse_detections(&reply, image.dimensions(), false)
    }

    /// Point-prompted segmentation; every returned detection carries a mask.
    pub fn segment_by_points(
        &self,
        image: &RgbImage,
        positive: &[(f64, f64)],
        negative: &[(f64, f64)],
    ) -> Result<Vec<Detection2D>, ClientError> {
        if positive.is_empty() {
            return Err(ClientError::InvalidInput("at least one positive point is required".into()));
        }
        let (w, h) = image.dimensions();
        for &(u, v) in positive.iter().chain(negative) {
            if !(u >= 0.0 && v >= 0.0 && u <= w as f64 && v <= h as f64) {
                return Err(ClientError::OutOfBoundsPoint { u, v, width: w, height: h });
            }
        }
        let pts = |p: &[(f64, f64)]| p.iter().map(|&(u, v)| json!([u, v])).collect::<Vec<_>>();
        let req = json!({
            "mode": "points",
            "image": encode_png_b64(image),
            "positive_points": pts(positive),
            "negative_points": pts(negative),
        });
        let reply = self.send(Role::Segmenter, &req)?;
        parse_detections(&reply, (w, h), true)
    }

    fn pointer_request(task: &str, prompt: &str, image: &RgbImage) -> impl Fn(u32) -> Value {
        let base = json!({"task": task, "prompt": prompt, "image": encode_png_b64(image)});
        move |attempt| {
            let mut v = base.clone();
            v["attempt"] = json!(attempt);
            v
        }
    }

    pub fn presence_check(&self, image: &RgbImage, query: &str, anchors: &str) -> Result<PresenceCheck, ClientError> {
        let prompt = prompts::presence_check(query, anchors);
        self.ask_parsed(
            Role::Pointer,
            Self::pointer_request("presence", &prompt, image),
            parse_presence_reply,
        )
    }

    pub fn point_prompt(&self, image: &RgbImage, query: &str, anchors: &str) -> Result<PointPromptResult, ClientError> {
        let prompt = prompts::point_prompt(query, anchors);
        let (w, h) = image.dimensions();
        self.ask_parsed(
            Role::Pointer,
            Self::pointer_request("point_prompt", &prompt, image),
            |t| parse_point_reply(t, w, h),
        )
    }

    pub fn verify_points(&self, annotated: &RgbImage, query: &str, anchors: &str) -> Result<Verification, ClientError> {
        let prompt = prompts::verify_points(query, anchors);
        self.ask_parsed(
            Role::Pointer,
            Self::pointer_request("verify", &prompt, annotated),
            parse_verify_reply,
        )
    }

    /// Multiple-choice reasoning over 1 to `batch_limit` composite images.
    ///
    /// Out-of-range ids and malformed replies are each reprompted up to
    /// `reprompt_retries` times; `-1` gets one reflection reprompt.
    pub fn choose_image(
        &self,
        images: &[RgbImage],
        query: &str,
        batch_limit: usize,
    ) -> Result<ChoiceSession, ClientError> {
        if images.is_empty() || images.len() > batch_limit {
            return Err(ClientError::InvalidInput(format!(
                "{} images supplied, expected 1..={batch_limit}",
                images.len()
            )));
        }
        let n = images.len();
        let encoded: Vec<String> = images.iter().map(encode_png_b64).collect();
        let mut turns = vec![Turn {
            role: "user",
            text: prompts::choose_image(query, n),
            images: n,
        }];
        let (mut invalid, mut wrong, mut reflected) = (0u32, 0u32, false);
        let budget = self.policy.reprompt_retries;
        loop {
            let req = json!({"task": "choose", "messages": render_turns(&turns, &encoded)});
            let text = self.send_text(Role::Reasoner, &req)?;
            let reprompts = invalid + wrong + reflected as u32;
            let next = match parse_choice_reply(&text) {
                Err(e) => {
                    if wrong >= budget {
                        return Err(ClientError::RefusalOrExhausted(format!("malformed replies: {e}")));
                    }
                    wrong += 1;
                    prompts::wrong_format()
                }
                Ok(c) if c.image_id == -1 => {
                    if reflected {
                        return Err(ClientError::RefusalOrExhausted(
                            "no image matches the query after reflection".into(),
                        ));
                    }
                    reflected = true;
                    prompts::reflection()
                }
                Ok(c) if c.image_id < 0 || c.image_id >= n as i64 => {
                    if invalid >= budget {
                        return Err(ClientError::RefusalOrExhausted(format!(
                            "image_id {} out of range after {invalid} reprompts",
                            c.image_id
                        )));
                    }
                    invalid += 1;
                    prompts::image_id_invalid(c.image_id)
                }
                Ok(result) => {
                    turns.push(Turn { role: "assistant", text, images: 0 });
                    return Ok(ChoiceSession { result, reprompts, turns });
                }
            };
            turns.push(Turn { role: "assistant", text, images: 0 });
            turns.push(Turn { role: "user", text: next, images: 0 });
        }
    }
}

fn render_turns(turns: &[Turn], images: &[String]) -> Value {
    Value::Array(
        turns
            .iter()
            .map(|t| {
                let mut content = vec![json!({"type": "text", "text": t.text})];
                content.extend(images.iter().take(t.images).map(|d| json!({"type": "image", "data": d})));
                json!({"role": t.role, "content": content})
            })
            .collect(),
    )
}

fn parse_detections(reply: &Value, dims: (u32, u32), need_mask: bool) -> Result<Vec<Detection2D>, ClientError> {
    let bad = |message: String| ClientError::Service { role: Role::Segmenter, message };
    let arr = reply
        .get("detections")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("reply has no 'detections' array".into()))?;
    arr.iter()
        .enumerate()
        .map(|(i, d)| {
            let b = d
                .get("box")
                .and_then(Value::as_array)
                .filter(|b| b.len() == 4)
                .and_then(|b| b.iter().map(Value::as_f64).collect::<Option<Vec<_>>>())
                .ok_or_else(|| bad(format!("detection {i}: 'box' must be 4 numbers")))?;
            let score = d
                .get("score")
                .and_then(Value::as_f64)
                .filter(|s| (0.0..=1.0).contains(s))
                .ok_or_else(|| bad(format!("detection {i}: 'score' must be in [0, 1]")))?;
            let mask = match d.get("mask") {
                None | Some(Value::Null) => None,
                Some(m) => {
                    let rle: RleMask = serde_json::from_value(m.clone())
                        .map_err(|e| bad(format!("detection {i}: mask: {e}")))?;
                    if (rle.width, rle.height) != dims {
                        return Err(bad(format!(
                            "detection {i}: mask is {}x{}, image is {}x{}",
                            rle.width, rle.height, dims.0, dims.1
                        )));
                    }
                    Some(rle.decode().map_err(|e| bad(format!("detection {i}: {e}")))?)
                }
            };
            if need_mask && mask.is_none() {
                return Err(bad(format!("detection {i}: point-prompted detections need a mask")));
            }
            Ok(Detection2D {
                bbox: Box2D::new(b[0], b[1], b[2], b[3]),
                score,
                mask,
            })
        })
        .collect()
}

/// Endpoint configuration read from the environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Endpoints {
    pub parser: String,
    pub embedder: String,
    pub segmenter: String,
    pub pointer: String,
    pub reasoner: String,
    pub token: Option<String>,
}

impl Endpoints {
    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, ClientError> {
        let need = |k: &str| {
            get(k)
                .filter(|v| !v.is_empty())
                .ok_or_else(|| ClientError::Config(format!("{k} is not set")))
        };
        let reasoner = need("MCM_VLM_URL")?;
        Ok(Self {
            parser: need("MCM_PARSER_URL")?,
            embedder: need("MCM_EMBEDDER_URL")?,
            segmenter: need("MCM_SEGMENTER_URL")?,
            pointer: get("MCM_POINTER_URL")
                .filter(|v| !v.is_empty())
                .unwrap_or_else(|| reasoner.clone()),
            reasoner,
            token: get("MCM_API_TOKEN").filter(|v| !v.is_empty()),
        })
    }

    pub fn base(&self, role: Role) -> &str {
        match role {
            Role::Parser => &self.parser,
            Role::Embedder => &self.embedder,
            Role::Segmenter => &self.segmenter,
            Role::Pointer => &self.pointer,
            Role::Reasoner => &self.reasoner,
        }
    }
}

/// `MCM_BACKEND=live` (default) or `mock:<fixtures-dir>`.
pub fn backend_from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Arc<dyn Backend>, ClientError> {
    let mode = get("MCM_BACKEND").unwrap_or_else(|| "live".into());
    if mode == "live" {
        let endpoints = Endpoints::from_lookup(&get)?;
        return Ok(Arc::new(HttpBackend::new(endpoints, http::DEFAULT_TIMEOUT)));
    }
    if let Some(dir) = mode.strip_prefix("mock:") {
        if dir.is_empty() {
            return Err(ClientError::Config("MCM_BACKEND=mock: needs a directory".into()));
        }
        return Ok(Arc::new(FixtureBackend::new(dir)));
    }
    Err(ClientError::Config(format!(
        "MCM_BACKEND must be 'live' or 'mock:<dir>', got '{mode}'"
    )))
}

pub fn backend_from_env() -> Result<Arc<dyn Backend>, ClientError> {
    backend_from_lookup(|k| std::env::var(k).ok())
}
