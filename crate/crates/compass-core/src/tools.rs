//! Tool registry and invocation with retry capping, plus fixture-backed
//! mock search/browse/code tools and an optional remote HTTP adapter.
//!
//! Tool failures are never loop exceptions: they come back as a
//! `ToolResult` whose content is surfaced to the main agent as an
//! observation, prefixed with [`TOOL_ERROR_PREFIX`] so the monitor can
//! count consecutive failures.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Marker prepended to failed-tool observations.
pub const TOOL_ERROR_PREFIX: &str = "[tool-error]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamType {
    String,
    Number,
    Boolean,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamType,
    pub required: bool,
}

/// Declares a tool: unique name, human description, and a shallow
/// parameter schema (no nesting).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub parameters: Vec<ParamSpec>,
}

impl ToolSpec {
    pub fn new(
        name: impl Into<String>,
        description: impl Into<String>,
        parameters: Vec<ParamSpec>,
    ) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
            parameters,
        }
    }

    fn first_required_param(&self) -> Option<&ParamSpec> {
        self.parameters
            .iter()
            .find(|p| p.required)
            .or_else(|| self.parameters.first())
    }
}

/// A tool invocation as parsed from model output. `raw_text` keeps the
/// call's argument payload exactly as written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCallRecord {
    pub tool_name: String,
    pub arguments: BTreeMap<String, Value>,
    pub raw_text: String,
}

impl ToolCallRecord {
    /// Builds a record from a call body. A body that parses as a JSON
    /// object becomes named arguments; anything else is kept raw and bound
    /// to the tool's first required parameter at invocation time.
    pub fn from_body(tool_name: impl Into<String>, body: &str) -> Self {
        let body = body.trim();
        let arguments = match serde_json::from_str::<Value>(body) {
            Ok(Value::Object(map)) => map.into_iter().collect(),
            _ => BTreeMap::new(),
        };
        Self {
            tool_name: tool_name.into(),
            arguments,
            raw_text: body.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolResult {
    pub content: String,
    pub success: bool,
    pub retries_used: u32,
}

/// What one tool attempt produced. `Transient` failures are retried up to
/// the cap; `Failure` is permanent and returned immediately.
pub enum ToolOutcome {
    Success(String),
    Transient(String),
    Failure(String),
}

pub trait Tool: Send + Sync {
    fn call(&self, args: &BTreeMap<String, Value>) -> ToolOutcome;

    /// Per-run instance with fresh mutable state (failure-script counters).
    /// Stateless tools return a handle to themselves.
    fn for_run(self: Arc<Self>) -> Arc<dyn Tool>;
}

struct RegisteredTool {
    spec: ToolSpec,
    imp: Arc<dyn Tool>,
}

/// Immutable-after-setup tool catalogue. Lookup is by unique name.
#[derive(Default)]
pub struct ToolRegistry {
    entries: BTreeMap<String, RegisteredTool>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_tool(&mut self, spec: ToolSpec, imp: Arc<dyn Tool>) -> Result<(), ToolError> {
        if spec.description.trim().is_empty() {
            return Err(ToolError::InvalidSpec(
                "tool description must be non-empty".into(),
            ));
        }
        if self.entries.contains_key(&spec.name) {
            return Err(ToolError::DuplicateTool(spec.name));
        }
        self.entries
            .insert(spec.name.clone(), RegisteredTool { spec, imp });
        Ok(())
    }

    pub fn lookup(&self, name: &str) -> Option<&ToolSpec> {
        self.entries.get(name).map(|e| &e.spec)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn specs(&self) -> Vec<ToolSpec> {
        self.entries.values().map(|e| e.spec.clone()).collect()
    }

    /// A sibling registry whose tools carry fresh per-run state.
    pub fn for_run(&self) -> ToolRegistry {
        let entries = self
            .entries
            .iter()
            .map(|(name, e)| {
                (
                    name.clone(),
                    RegisteredTool {
                        spec: e.spec.clone(),
                        imp: Arc::clone(&e.imp).for_run(),
                    },
                )
            })
            .collect();
        ToolRegistry { entries }
    }

    /// Invokes a tool, retrying transient failures up to `retry_cap` extra
    /// attempts. Unknown tools and schema violations are returned as
    /// errors for the caller to absorb into an observation.
    pub fn invoke(&self, call: &ToolCallRecord, retry_cap: u32) -> Result<ToolResult, ToolError> {
        let entry = self
            .entries
            .get(&call.tool_name)
            .ok_or_else(|| ToolError::ToolNotFound(call.tool_name.clone()))?;
        let args = bind_arguments(&entry.spec, call)?;
        let mut last_diag = String::new();
        for attempt in 0..=retry_cap {
            match entry.imp.call(&args) {
                ToolOutcome::Success(content) => {
                    return Ok(ToolResult {
                        content,
                        success: true,
                        retries_used: attempt,
                    })
                }
                ToolOutcome::Failure(diag) => {
                    return Ok(ToolResult {
                        content: diag,
                        success: false,
                        retries_used: attempt,
                    })
                }
                ToolOutcome::Transient(diag) => last_diag = diag,
            }
        }
        Ok(ToolResult {
            content: format!("gave up after {} retries: {last_diag}", retry_cap),
            success: false,
            retries_used: retry_cap,
        })
    }
}

/// Resolves a call's arguments against the declared schema. A bare body is
/// bound to the first required parameter; types are checked shallowly.
fn bind_arguments(
    spec: &ToolSpec,
    call: &ToolCallRecord,
) -> Result<BTreeMap<String, Value>, ToolError> {
    let mut args = call.arguments.clone();
    if args.is_empty() && !call.raw_text.is_empty() {
        if let Some(param) = spec.first_required_param() {
            args.insert(param.name.clone(), Value::String(call.raw_text.clone()));
        }
    }
    for param in &spec.parameters {
        match args.get(&param.name) {
            None if param.required => {
                return Err(ToolError::ArgumentSchemaViolation(format!(
                    "{}: missing required argument {:?}",
                    spec.name, param.name
                )))
            }
            None => {}
            Some(value) => {
                let ok = match param.kind {
                    ParamType::String => value.is_string(),
                    ParamType::Number => value.is_number(),
                    ParamType::Boolean => value.is_boolean(),
                };
                if !ok {
                    return Err(ToolError::ArgumentSchemaViolation(format!(
                        "{}: argument {:?} has the wrong type",
                        spec.name, param.name
                    )));
                }
            }
        }
    }
    Ok(args)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ToolError {
    #[error("tool {0:?} is already registered")]
    DuplicateTool(String),
    #[error("unknown tool {0:?}")]
    ToolNotFound(String),
    #[error("argument schema violation: {0}")]
    ArgumentSchemaViolation(String),
    #[error("invalid tool spec: {0}")]
    InvalidSpec(String),
}

// ---------------------------------------------------------------------------
// Fixture-backed mock tools
// ---------------------------------------------------------------------------

/// Scripted transient failures: the first `fail_first` attempts of the
/// named tool fail with `message`, then calls succeed normally.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FailureScript {
    pub fail_first: u32,
    #[serde(default = "default_failure_message")]
    pub message: String,
}

fn default_failure_message() -> String {
    "transient backend error".to_string()
}

/// Deterministic corpus backing the mock tools.
///
/// Schema (JSON): `{"schema_version": 1, "search": {...}, "browse": {...},
/// "failures": {...}}`. Search keys are normalized queries (lowercased,
/// whitespace collapsed), browse keys are trimmed URLs, and failures maps a
/// tool name to a [`FailureScript`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockCorpus {
    #[serde(default = "corpus_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub search: BTreeMap<String, String>,
    #[serde(default)]
    pub browse: BTreeMap<String, String>,
    #[serde(default)]
    pub failures: BTreeMap<String, FailureScript>,
}

fn corpus_version() -> u32 {
    1
}

impl MockCorpus {
    pub fn from_path(path: &Path) -> Result<Self, ToolError> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| ToolError::InvalidSpec(format!("corpus {path:?}: {e}")))?;
        serde_json::from_str(&body)
            .map_err(|e| ToolError::InvalidSpec(format!("corpus {path:?}: {e}")))
    }
}

pub fn normalize_query(query: &str) -> String {
    query
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn string_arg<'a>(args: &'a BTreeMap<String, Value>, name: &str) -> &'a str {
    args.get(name).and_then(Value::as_str).unwrap_or_default()
}

struct FailureGate {
    script: Option<FailureScript>,
    attempts: AtomicU32,
}

impl FailureGate {
    fn new(script: Option<FailureScript>) -> Self {
        Self {
            script,
            attempts: AtomicU32::new(0),
        }
    }

    /// Returns the diagnostic for this attempt if the script says to fail.
    fn check(&self) -> Option<String> {
        let script = self.script.as_ref()?;
        let attempt = self.attempts.fetch_add(1, Ordering::SeqCst);
        (attempt < script.fail_first).then(|| script.message.clone())
    }

    fn attempts_made(&self) -> u32 {
        self.attempts.load(Ordering::SeqCst)
    }
}

macro_rules! mock_tool {
    ($name:ident, $tool:literal) => {
        pub struct $name {
            corpus: Arc<MockCorpus>,
            gate: FailureGate,
        }

        impl $name {
            pub fn new(corpus: Arc<MockCorpus>) -> Self {
                let script = corpus.failures.get($tool).cloned();
                Self {
                    corpus,
                    gate: FailureGate::new(script),
                }
            }

            /// Total attempts seen, including scripted failures.
            pub fn attempts_made(&self) -> u32 {
                self.gate.attempts_made()
            }
        }
    };
}

mock_tool!(MockSearch, "search");
mock_tool!(MockBrowse, "browse");

impl Tool for MockSearch {
    fn call(&self, args: &BTreeMap<String, Value>) -> ToolOutcome {
        if let Some(diag) = self.gate.check() {
            return ToolOutcome::Transient(diag);
        }
        let query = normalize_query(string_arg(args, "query"));
        match self.corpus.search.get(&query) {
            Some(result) => ToolOutcome::Success(result.clone()),
            None => ToolOutcome::Success(format!("No results for {query:?}.")),
        }
    }

    fn for_run(self: Arc<Self>) -> Arc<dyn Tool> {
        Arc::new(MockSearch::new(Arc::clone(&self.corpus)))
    }
}

impl Tool for MockBrowse {
    fn call(&self, args: &BTreeMap<String, Value>) -> ToolOutcome {
        if let Some(diag) = self.gate.check() {
            return ToolOutcome::Transient(diag);
        }
        let url = string_arg(args, "url").trim().to_string();
        match self.corpus.browse.get(&url) {
            Some(page) => ToolOutcome::Success(page.clone()),
            None => ToolOutcome::Failure(format!("no page at {url:?}")),
        }
    }

    fn for_run(self: Arc<Self>) -> Arc<dyn Tool> {
        Arc::new(MockBrowse::new(Arc::clone(&self.corpus)))
    }
}

/// Evaluates a whitelisted arithmetic subset: numbers, `+ - * /`, unary
/// minus, and parentheses. Anything else is a permanent failure.
pub struct MockCode {
    gate: FailureGate,
}

impl MockCode {
    pub fn new(corpus: &MockCorpus) -> Self {
        Self {
            gate: FailureGate::new(corpus.failures.get("code").cloned()),
        }
    }
}

impl Tool for MockCode {
    fn call(&self, args: &BTreeMap<String, Value>) -> ToolOutcome {
        if let Some(diag) = self.gate.check() {
            return ToolOutcome::Transient(diag);
        }
        let expr = string_arg(args, "expression");
        match eval_arithmetic(expr) {
            Ok(value) => ToolOutcome::Success(format_number(value)),
            Err(diag) => ToolOutcome::Failure(diag),
        }
    }

    fn for_run(self: Arc<Self>) -> Arc<dyn Tool> {
        Arc::new(MockCode {
            gate: FailureGate::new(self.gate.script.clone()),
        })
    }
}

fn format_number(value: f64) -> String {
    if value.fract() == 0.0 && value.abs() < 1e15 {
        format!("{}", value as i64)
    } else {
        format!("{value}")
    }
}

fn eval_arithmetic(expr: &str) -> Result<f64, String> {
    if expr.trim().is_empty() {
        return Err("empty expression".to_string());
    }
    if let Some(bad) = expr
        .chars()
        .find(|c| !c.is_ascii_digit() && !"+-*/(). \t\n".contains(*c))
    {
        return Err(format!(
            "character {bad:?} is outside the arithmetic whitelist"
        ));
    }
    let tokens: Vec<char> = expr.chars().filter(|c| !c.is_whitespace()).collect();
    let mut pos = 0;
    let value = parse_expr(&tokens, &mut pos)?;
    if pos != tokens.len() {
        return Err(format!("unexpected trailing input at position {pos}"));
    }
    Ok(value)
}

fn parse_expr(tokens: &[char], pos: &mut usize) -> Result<f64, String> {
    let mut value = parse_term(tokens, pos)?;
    while let Some(op) = tokens.get(*pos).copied() {
        match op {
            '+' => {
                *pos += 1;
                value += parse_term(tokens, pos)?;
            }
            '-' => {
                *pos += 1;
                value -= parse_term(tokens, pos)?;
            }
            _ => break,
        }
    }
    Ok(value)
}

fn parse_term(tokens: &[char], pos: &mut usize) -> Result<f64, String> {
    let mut value = parse_factor(tokens, pos)?;
    while let Some(op) = tokens.get(*pos).copied() {
        match op {
            '*' => {
                *pos += 1;
                value *= parse_factor(tokens, pos)?;
            }
            '/' => {
                *pos += 1;
                let rhs = parse_factor(tokens, pos)?;
                if rhs == 0.0 {
                    return Err("division by zero".to_string());
                }
                value /= rhs;
            }
            _ => break,
        }
    }
    Ok(value)
}

fn parse_factor(tokens: &[char], pos: &mut usize) -> Result<f64, String> {
    match tokens.get(*pos).copied() {
        Some('-') => {
            *pos += 1;
            Ok(-parse_factor(tokens, pos)?)
        }
        Some('(') => {
            *pos += 1;
            let value = parse_expr(tokens, pos)?;
            if tokens.get(*pos) != Some(&')') {
                return Err("missing closing parenthesis".to_string());
            }
            *pos += 1;
            Ok(value)
        }
        Some(c) if c.is_ascii_digit() || c == '.' => {
            let start = *pos;
            while tokens
                .get(*pos)
                .is_some_and(|c| c.is_ascii_digit() || *c == '.')
            {
                *pos += 1;
            }
            let literal: String = tokens[start..*pos].iter().collect();
            literal
                .parse::<f64>()
                .map_err(|_| format!("bad number literal {literal:?}"))
        }
        other => Err(format!("unexpected token {other:?}")),
    }
}

/// Specs for the three built-in mock tools.
pub fn builtin_tool_specs() -> Vec<ToolSpec> {
    vec![
        ToolSpec::new(
            "search",
            "Web search over the fixture corpus; returns result snippets for a query.",
            vec![ParamSpec {
                name: "query".into(),
                kind: ParamType::String,
                required: true,
            }],
        ),
        ToolSpec::new(
            "browse",
            "Fetches the page text for a URL from the fixture corpus.",
            vec![ParamSpec {
                name: "url".into(),
                kind: ParamType::String,
                required: true,
            }],
        ),
        ToolSpec::new(
            "code",
            "Evaluates a small arithmetic expression (numbers, + - * /, parentheses).",
            vec![ParamSpec {
                name: "expression".into(),
                kind: ParamType::String,
                required: true,
            }],
        ),
    ]
}

/// Registry with the mock search, browse, and code tools over one corpus.
pub fn mock_registry(corpus: MockCorpus) -> ToolRegistry {
    let corpus = Arc::new(corpus);
    let mut registry = ToolRegistry::new();
    let [search, browse, code]: [ToolSpec; 3] = builtin_tool_specs()
        .try_into()
        .expect("three builtin specs");
    registry
        .register_tool(search, Arc::new(MockSearch::new(Arc::clone(&corpus))))
        .expect("fresh registry");
    registry
        .register_tool(browse, Arc::new(MockBrowse::new(Arc::clone(&corpus))))
        .expect("fresh registry");
    registry
        .register_tool(code, Arc::new(MockCode::new(&corpus)))
        .expect("fresh registry");
    registry
}

// ---------------------------------------------------------------------------
// Optional remote adapter
// ---------------------------------------------------------------------------

/// Forwards calls as HTTP POST `{tool, arguments}` and expects
/// `{content, success}` back. Disabled unless explicitly registered.
pub struct RemoteTool {
    pub tool_name: String,
    pub endpoint: String,
}

#[derive(Deserialize)]
struct RemoteToolReply {
    content: String,
    success: bool,
}

impl Tool for RemoteTool {
    fn call(&self, args: &BTreeMap<String, Value>) -> ToolOutcome {
        let body = serde_json::json!({ "tool": self.tool_name, "arguments": args });
        let reply = ureq::post(&self.endpoint)
            .timeout(std::time::Duration::from_secs(30))
            .send_json(body);
        match reply {
            Ok(resp) => match resp.into_json::<RemoteToolReply>() {
                Ok(r) if r.success => ToolOutcome::Success(r.content),
                Ok(r) => ToolOutcome::Failure(r.content),
                Err(e) => ToolOutcome::Failure(format!("bad adapter reply: {e}")),
            },
            Err(e) => ToolOutcome::Transient(format!("adapter unreachable: {e}")),
        }
    }

    fn for_run(self: Arc<Self>) -> Arc<dyn Tool> {
        self
    }
}
