//! Uniform access to text generation: a remote OpenAI-compatible endpoint
//! and a deterministic scripted backend for tests, plus token counting and
//! per-call usage logging.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Fixed chars/4 token heuristic, applied uniformly across components.
/// Remote responses may override it with wire-reported usage.
pub fn count_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

/// Which pipeline component issued a gateway call. Tags scripted-fixture
/// keys, the call log, and trajectory-log lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Main,
    Meta,
    Context,
    Synthesizer,
    /// Evaluation-side judge calls; never appears in run token reports.
    Judge,
}

impl Component {
    pub fn as_str(&self) -> &'static str {
        match self {
            Component::Main => "main",
            Component::Meta => "meta",
            Component::Context => "context",
            Component::Synthesizer => "synthesizer",
            Component::Judge => "judge",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// One completion request. Messages must be non-empty and start with a
/// system or user message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub nucleus_mass: f64,
    pub seed: Option<u64>,
    pub max_output_tokens: Option<u32>,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            temperature: 0.7,
            nucleus_mass: 0.95,
            seed: None,
            max_output_tokens: None,
        }
    }

    pub fn with_sampling(mut self, sampling: &crate::model::SamplingParams) -> Self {
        self.temperature = sampling.temperature;
        self.nucleus_mass = sampling.nucleus_mass;
        self.seed = sampling.seed;
        self
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest(
                "messages must be non-empty".into(),
            ));
        }
        if self.messages[0].role == Role::Assistant {
            return Err(GatewayError::InvalidRequest(
                "first message must be system or user".into(),
            ));
        }
        if self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(
                "temperature must be >= 0".into(),
            ));
        }
        if !(self.nucleus_mass > 0.0 && self.nucleus_mass <= 1.0) {
            return Err(GatewayError::InvalidRequest(
                "nucleus_mass must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Canonical text of the request, used for prompt-token counting and
    /// fixture override hashing.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            out.push_str(m.role.as_str());
            out.push_str(": ");
            out.push_str(&m.content);
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Remote,
    Scripted,
}

/// Where completions come from: an endpoint URL for remote backends, a
/// fixture path for scripted ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub kind: BackendKind,
    pub locator: String,
    pub credentials_env: String,
}

impl BackendSpec {
    pub fn remote(url: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Remote,
            locator: url.into(),
            credentials_env: "COMPASS_API_KEY".to_string(),
        }
    }

    pub fn scripted(path: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Scripted,
            locator: path.into(),
            credentials_env: "COMPASS_API_KEY".to_string(),
        }
    }

    /// Parses the CLI notation `remote:<url>` / `scripted:<path>`.
    pub fn parse(text: &str) -> Result<Self, GatewayError> {
        if let Some(url) = text.strip_prefix("remote:") {
            Ok(Self::remote(url))
        } else if let Some(path) = text.strip_prefix("scripted:") {
            Ok(Self::scripted(path))
        } else {
            Err(GatewayError::InvalidRequest(format!(
                "backend must be remote:<url> or scripted:<path>, got {text:?}"
            )))
        }
    }
}

/// Scripted completion fixture.
///
/// Schema (JSON): `{"schema_version": 1, "entries": {...}, "overrides": {...}}`.
/// Entry keys are `<component>:<index>` where the index is the per-component
/// call sequence number within a run; `<component>:*` is an optional
/// fallback matched when no indexed entry exists. Override keys are the
/// first 16 hex chars of the SHA-256 of the request's canonical text and
/// take precedence over sequence keys.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScriptedFixture {
    #[serde(default = "fixture_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub entries: HashMap<String, String>,
    #[serde(default)]
    pub overrides: HashMap<String, String>,
}

fn fixture_version() -> u32 {
    1
}

impl ScriptedFixture {
    pub fn from_path(path: &Path) -> Result<Self, GatewayError> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::BackendUnreachable(format!("fixture {path:?}: {e}")))?;
        serde_json::from_str(&body)
            .map_err(|e| GatewayError::MalformedResponse(format!("fixture {path:?}: {e}")))
    }

    /// Builder used by tests to assemble fixtures in memory.
    pub fn with_entry(mut self, key: impl Into<String>, text: impl Into<String>) -> Self {
        self.entries.insert(key.into(), text.into());
        self
    }

    fn resolve(&self, component: Component, index: usize, request_hash: &str) -> Option<&str> {
        if let Some(text) = self.overrides.get(request_hash) {
            return Some(text);
        }
        let keyed = format!("{}:{}", component.as_str(), index);
        if let Some(text) = self.entries.get(&keyed) {
            return Some(text);
        }
        self.entries
            .get(&format!("{}:*", component.as_str()))
            .map(String::as_str)
    }
}

pub fn request_hash(request: &ChatRequest) -> String {
    let digest = Sha256::digest(request.canonical_text().as_bytes());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    hex[..16].to_string()
}

/// One gateway call as recorded in the per-run call log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub component: Component,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

enum BackendImpl {
    Scripted(ScriptedFixture),
    Remote {
        url: String,
        credentials_env: String,
    },
}

/// A shareable handle over one backend. Fixture cursors and the call log
/// are per-run: `for_run` yields a sibling handle over the same backend
/// with fresh state.
pub struct Gateway {
    backend: Arc<BackendImpl>,
    cursors: Mutex<HashMap<Component, usize>>,
    log: Mutex<Vec<CallRecord>>,
}

impl Gateway {
    pub fn from_spec(spec: &BackendSpec) -> Result<Self, GatewayError> {
        let backend = match spec.kind {
            BackendKind::Scripted => {
                BackendImpl::Scripted(ScriptedFixture::from_path(Path::new(&spec.locator))?)
            }
            BackendKind::Remote => BackendImpl::Remote {
                url: spec.locator.clone(),
                credentials_env: spec.credentials_env.clone(),
            },
        };
        Ok(Self {
            backend: Arc::new(backend),
            cursors: Mutex::new(HashMap::new()),
            log: Mutex::new(Vec::new()),
        })
    }

    pub fn scripted(fixture: ScriptedFixture) -> Self {
        Self {
            backend: Arc::new(BackendImpl::Scripted(fixture)),
            cursors: Mutex::new(HashMap::new()),
            log: Mutex::new(Vec::new()),
        }
    }

    /// Same backend, fresh cursors and call log.
    pub fn for_run(&self) -> Gateway {
        Gateway {
            backend: Arc::clone(&self.backend),
            cursors: Mutex::new(HashMap::new()),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn call_log(&self) -> Vec<CallRecord> {
        self.log.lock().expect("call log lock").clone()
    }

    /// Issues one completion on behalf of `component`. Completions are
    /// returned whole; there is no streaming.
    pub fn complete(
        &self,
        component: Component,
        request: &ChatRequest,
    ) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let response = match &*self.backend {
            BackendImpl::Scripted(fixture) => {
                self.complete_scripted(fixture, component, request)?
            }
            BackendImpl::Remote {
                url,
                credentials_env,
            } => complete_remote(url, credentials_env, request)?,
        };
        self.log.lock().expect("call log lock").push(CallRecord {
            component,
            prompt_tokens: response.prompt_tokens,
            completion_tokens: response.completion_tokens,
        });
        Ok(response)
    }

    fn complete_scripted(
        &self,
        fixture: &ScriptedFixture,
        component: Component,
        request: &ChatRequest,
    ) -> Result<ChatResponse, GatewayError> {
        let hash = request_hash(request);
        // cursor take-and-advance is one critical section; concurrent
        // callers consume distinct fixture slots
        let index = {
            let mut cursors = self.cursors.lock().expect("cursor lock");
            let slot = cursors.entry(component).or_insert(0);
            let index = *slot;
            *slot += 1;
            index
        };
        let text = fixture.resolve(component, index, &hash).ok_or_else(|| {
            GatewayError::FixtureExhausted {
                component: component.as_str(),
                index,
            }
        })?;
        Ok(ChatResponse {
            text: text.to_string(),
            prompt_tokens: count_tokens(&request.canonical_text()),
            completion_tokens: count_tokens(text),
        })
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
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: Option<u64>,
    #[serde(default)]
    completion_tokens: Option<u64>,
}

fn complete_remote(
    url: &str,
    credentials_env: &str,
    request: &ChatRequest,
) -> Result<ChatResponse, GatewayError> {
    let mut body = serde_json::json!({
        "model": std::env::var("COMPASS_MODEL").unwrap_or_else(|_| "default".to_string()),
        "messages": request
            .messages
            .iter()
            .map(|m| serde_json::json!({"role": m.role.as_str(), "content": m.content}))
            .collect::<Vec<_>>(),
        "temperature": request.temperature,
        "top_p": request.nucleus_mass,
    });
    if let Some(seed) = request.seed {
        body["seed"] = seed.into();
    }
    if let Some(max) = request.max_output_tokens {
        body["max_tokens"] = max.into();
    }

    let mut call = ureq::post(url).timeout(std::time::Duration::from_secs(60));
    if let Ok(token) = std::env::var(credentials_env) {
        call = call.set("Authorization", &format!("Bearer {token}"));
    }
    let reply = call
        .send_json(body)
        .map_err(|e| GatewayError::BackendUnreachable(e.to_string()))?;
    let parsed: WireResponse = reply
        .into_json()
        .map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
    let choice = parsed
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| GatewayError::MalformedResponse("no choices in response".into()))?;
    let text = choice
        .message
        .content
        .ok_or_else(|| GatewayError::MalformedResponse("choice has no content".into()))?;
    let usage = parsed.usage.unwrap_or(WireUsage {
        prompt_tokens: None,
        completion_tokens: None,
    });
    Ok(ChatResponse {
        prompt_tokens: usage
            .prompt_tokens
            .unwrap_or_else(|| count_tokens(&request.canonical_text())),
        completion_tokens: usage
            .completion_tokens
            .unwrap_or_else(|| count_tokens(&text)),
        text,
    })
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("scripted fixture has no entry for {component}:{index}")]
    FixtureExhausted {
        component: &'static str,
        index: usize,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}
