//! Chat-completion seam. Every model call in the engine goes through
//! [`ChatBackend`]; the remote client is the only code that talks to a model
//! endpoint.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::retry::RetryPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    #[serde(default)]
    pub temperature: f64,
    pub max_output_tokens: u32,
}

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 2048;

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        ChatRequest {
            model: model.into(),
            messages,
            temperature: 0.0,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(Error::invalid("chat request needs at least one user message"));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::invalid("temperature must be >= 0"));
        }
        Ok(())
    }

    /// Stable key for replay tapes: SHA-256 over the model and the messages,
    /// with whitespace runs collapsed to single spaces.
    pub fn replay_hash(&self) -> String {
        let canon = serde_json::json!({
            "model": self.model,
            "messages": self.messages.iter().map(|m| serde_json::json!({
                "role": m.role,
                "content": canonical_whitespace(&m.content),
            })).collect::<Vec<_>>(),
        });
        let digest = Sha256::digest(canon.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn canonical_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish_reason: FinishReason,
    #[serde(default)]
    pub usage: Usage,
}

impl ChatResponse {
    pub fn stop(content: impl Into<String>) -> Self {
        ChatResponse {
            content: content.into(),
            finish_reason: FinishReason::Stop,
            usage: Usage::default(),
        }
    }
}

pub trait ChatBackend: Send + Sync {
    /// Model tag sent with requests and recorded as provenance.
    fn model(&self) -> &str;
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Arc<B> {
    fn model(&self) -> &str {
        (**self).model()
    }
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse> {
        (**self).complete(req)
    }
}

/// Sends `messages` to `backend` with the backend's model and default settings.
pub fn chat(backend: &dyn ChatBackend, messages: Vec<ChatMessage>) -> Result<ChatResponse> {
    let req = ChatRequest::new(backend.model(), messages);
    req.validate()?;
    backend.complete(&req)
}

type ChatFn = dyn Fn(&ChatRequest) -> Result<ChatResponse> + Send + Sync;

/// Backend driven by a closure. Used for scripted detectors and tests.
pub struct FnBackend {
    model: String,
    f: Box<ChatFn>,
}

impl FnBackend {
    pub fn new(
        model: impl Into<String>,
        f: impl Fn(&ChatRequest) -> Result<ChatResponse> + Send + Sync + 'static,
    ) -> Self {
        FnBackend { model: model.into(), f: Box::new(f) }
    }

    /// Replies with the text returned by `f` for the last user message.
    pub fn text(model: impl Into<String>, f: impl Fn(&str) -> String + Send + Sync + 'static) -> Self {
        Self::new(model, move |req| {
            let last = req
                .messages
                .iter()
                .rev()
                .find(|m| m.role == Role::User)
                .map(|m| m.content.as_str())
                .unwrap_or("");
            Ok(ChatResponse::stop(f(last)))
        })
    }
}

impl ChatBackend for FnBackend {
    fn model(&self) -> &str {
        &self.model
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse> {
        (self.f)(req)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapeEntry {
    pub hash: String,
    pub model: String,
    /// First characters of the last user message, for humans reading the tape.
    #[serde(default)]
    pub preview: String,
    pub response: ChatResponse,
}

#[derive(Clone)]
pub enum ReplayMode {
    /// Unknown requests fail with [`Error::ReplayMiss`].
    Strict,
    /// Unknown requests go to the inner backend and are appended to the tape.
    Record(Arc<dyn ChatBackend>),
}

/// Record/replay backend keyed by [`ChatRequest::replay_hash`].
///
/// Tape format: JSONL, one [`TapeEntry`] per line, sorted by hash.
pub struct ReplayBackend {
    model: String,
    mode: ReplayMode,
    path: Option<PathBuf>,
    tape: Arc<RwLock<BTreeMap<String, TapeEntry>>>,
    save_lock: Arc<Mutex<()>>,
}

impl ReplayBackend {
    pub fn strict(model: impl Into<String>, entries: impl IntoIterator<Item = TapeEntry>) -> Self {
        ReplayBackend {
            model: model.into(),
            mode: ReplayMode::Strict,
            path: None,
            tape: Arc::new(RwLock::new(entries.into_iter().map(|e| (e.hash.clone(), e)).collect())),
            save_lock: Arc::default(),
        }
    }

    pub fn recording(inner: Arc<dyn ChatBackend>) -> Self {
        ReplayBackend {
            model: inner.model().to_string(),
            mode: ReplayMode::Record(inner),
            path: None,
            tape: Arc::default(),
            save_lock: Arc::default(),
        }
    }

    /// Opens a tape file. A missing file is an empty tape in record mode and
    /// an error in strict mode.
    pub fn open(path: impl AsRef<Path>, model: impl Into<String>, mode: ReplayMode) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let entries = if path.exists() {
            load_tape(&path)?
        } else if matches!(mode, ReplayMode::Strict) {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("replay tape {} not found", path.display()),
            )));
        } else {
            Vec::new()
        };
        let model = match &mode {
            ReplayMode::Record(inner) => inner.model().to_string(),
            ReplayMode::Strict => model.into(),
        };
        Ok(ReplayBackend {
            model,
            mode,
            path: Some(path),
            tape: Arc::new(RwLock::new(entries.into_iter().map(|e| (e.hash.clone(), e)).collect())),
            save_lock: Arc::default(),
        })
    }

    /// A view that sends requests under `model` and shares this tape.
    pub fn with_model(&self, model: impl Into<String>) -> Self {
        ReplayBackend {
            model: model.into(),
            mode: self.mode.clone(),
            path: self.path.clone(),
            tape: Arc::clone(&self.tape),
            save_lock: Arc::clone(&self.save_lock),
        }
    }

    pub fn len(&self) -> usize {
        self.tape.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.tape.read().is_empty()
    }

    pub fn entries(&self) -> Vec<TapeEntry> {
        self.tape.read().values().cloned().collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let _guard = self.save_lock.lock();
        let tape = self.tape.read();
        let tmp = path.with_extension("tmp");
        {
            let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            for entry in tape.values() {
                serde_json::to_writer(&mut w, entry).map_err(|e| Error::Internal(e.to_string()))?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }
}

pub fn load_tape(path: &Path) -> Result<Vec<TapeEntry>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::ParseLine {
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

impl ChatBackend for ReplayBackend {
    fn model(&self) -> &str {
        &self.model
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse> {
        let hash = req.replay_hash();
        if let Some(hit) = self.tape.read().get(&hash) {
            return Ok(hit.response.clone());
        }
        match &self.mode {
            ReplayMode::Strict => Err(Error::ReplayMiss { hash }),
            ReplayMode::Record(inner) => {
                let response = inner.complete(req)?;
                let preview = req
                    .messages
                    .iter()
                    .rev()
                    .find(|m| m.role == Role::User)
                    .map(|m| m.content.chars().take(80).collect())
                    .unwrap_or_default();
                self.tape.write().insert(
                    hash.clone(),
                    TapeEntry { hash, model: req.model.clone(), preview, response: response.clone() },
                );
                if let Some(path) = &self.path {
                    self.save(path)?;
                }
                Ok(response)
            }
        }
    }
}

/// Counting semaphore bounding concurrent remote requests.
struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    cv: Condvar,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut active = self.active.lock();
        while *active >= self.limit {
            self.cv.wait(&mut active);
        }
        *active += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.active.lock() -= 1;
        self.0.cv.notify_one();
    }
}

pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

/// Client for an OpenAI-compatible `/chat/completions` endpoint.
pub struct OpenAiChat {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
    model: String,
    retry: RetryPolicy,
    in_flight: InFlight,
}

impl OpenAiChat {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, model: impl Into<String>) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(600))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(OpenAiChat {
            client,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            model: model.into(),
            retry: RetryPolicy::chat_default(),
            in_flight: InFlight {
                limit: DEFAULT_MAX_IN_FLIGHT,
                active: Mutex::new(0),
                cv: Condvar::new(),
            },
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.in_flight.limit = limit.max(1);
        self
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl ChatBackend for OpenAiChat {
    fn model(&self) -> &str {
        &self.model
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse> {
        req.validate()?;
        let _slot = self.in_flight.acquire();
        let url = format!("{}/chat/completions", self.base_url);
        let body = serde_json::json!({
            "model": req.model,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        });
        let resp = self.retry.send(|| {
            let r = self.client.post(&url).json(&body);
            match &self.api_key {
                Some(key) => r.bearer_auth(key),
                None => r,
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::BackendUnavailable {
                status: Some(status.as_u16()),
                message: resp.text().unwrap_or_default(),
            });
        }
        let wire: WireResponse = resp.json().map_err(|e| Error::BackendUnavailable {
            status: Some(status.as_u16()),
            message: format!("malformed chat response: {e}"),
        })?;
        let choice = wire.choices.into_iter().next().ok_or_else(|| Error::BackendUnavailable {
            status: Some(status.as_u16()),
            message: "chat response had no choices".into(),
        })?;
        let finish_reason = match choice.finish_reason.as_deref() {
            None | Some("stop") | Some("eos") => FinishReason::Stop,
            Some("length") => FinishReason::Length,
            Some(_) => FinishReason::Error,
        };
        let content = choice.message.content.unwrap_or_default();
        let usage = wire
            .usage
            .map(|u| Usage { prompt_tokens: u.prompt_tokens, output_tokens: u.completion_tokens })
            .unwrap_or_default();
        Ok(ChatResponse { content, finish_reason, usage })
    }
}
