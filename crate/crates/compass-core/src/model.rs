//! Shared domain types: queries, trajectories, briefs, notes, decisions,
//! run configuration and results.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tools::ToolSpec;

/// A task to solve, identified within a batch by `id`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self, ModelError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ModelError::EmptyQueryText);
        }
        Ok(Self {
            id: id.into(),
            text,
        })
    }
}

/// Fixed per-run information: the query, the tool catalogue, and the system
/// instructions handed to the main agent. Immutable once constructed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticContext {
    pub query: Query,
    pub tool_specs: Vec<ToolSpec>,
    pub system_instructions: String,
}

impl StaticContext {
    pub fn new(query: Query, tool_specs: Vec<ToolSpec>, system_instructions: String) -> Self {
        Self {
            query,
            tool_specs,
            system_instructions,
        }
    }
}

/// What a trajectory step is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Thought,
    ToolCall,
    ToolResponse,
    Answer,
}

impl StepKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepKind::Thought => "thought",
            StepKind::ToolCall => "tool_call",
            StepKind::ToolResponse => "tool_response",
            StepKind::Answer => "answer",
        }
    }
}

/// One element of a turn's execution trace.
///
/// `tool_name` is present exactly when the kind is a tool call or a tool
/// response; the constructor enforces this.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub index: usize,
    pub kind: StepKind,
    pub content: String,
    pub tool_name: Option<String>,
    pub token_count: u64,
}

impl TrajectoryStep {
    pub fn new(
        index: usize,
        kind: StepKind,
        content: impl Into<String>,
        tool_name: Option<String>,
        token_count: u64,
    ) -> Result<Self, ModelError> {
        let needs_tool = matches!(kind, StepKind::ToolCall | StepKind::ToolResponse);
        if needs_tool != tool_name.is_some() {
            return Err(ModelError::ToolNameMismatch { kind });
        }
        Ok(Self {
            index,
            kind,
            content: content.into(),
            tool_name,
            token_count,
        })
    }
}

/// The dynamic context of one outer turn: an ordered, append-only list of
/// steps. At most one `Answer` step may exist and it must be last; every
/// `ToolResponse` directly follows the `ToolCall` it answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub turn_id: usize,
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn new(turn_id: usize) -> Self {
        Self {
            turn_id,
            steps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Appends a step, preserving the trajectory invariants.
    pub fn append_step(&mut self, step: TrajectoryStep) -> Result<(), AppendError> {
        if self
            .steps
            .last()
            .is_some_and(|s| s.kind == StepKind::Answer)
        {
            return Err(AppendError::AppendAfterAnswer);
        }
        if step.index != self.steps.len() {
            return Err(AppendError::IndexMismatch {
                expected: self.steps.len(),
                got: step.index,
            });
        }
        if step.kind == StepKind::ToolResponse {
            let paired = self
                .steps
                .last()
                .is_some_and(|p| p.kind == StepKind::ToolCall && p.tool_name == step.tool_name);
            if !paired {
                return Err(AppendError::PairingViolation);
            }
        }
        self.steps.push(step);
        Ok(())
    }

    /// Total token footprint of the dynamic context: the sum of per-step
    /// token counts. Monotone non-decreasing under `append_step`.
    pub fn dynamic_context_size(&self) -> u64 {
        self.steps.iter().map(|s| s.token_count).sum()
    }

    /// True iff the trajectory ends in an `Answer` step.
    pub fn has_final_answer(&self) -> bool {
        self.steps
            .last()
            .is_some_and(|s| s.kind == StepKind::Answer)
    }

    /// Content of the trailing `Answer` step, if any.
    pub fn final_answer(&self) -> Option<&str> {
        self.steps
            .last()
            .filter(|s| s.kind == StepKind::Answer)
            .map(|s| s.content.as_str())
    }

    /// Number of model-generated steps (everything except tool responses).
    pub fn model_step_count(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.kind != StepKind::ToolResponse)
            .count()
    }

    /// One line per step, each content clipped, for judge and supervisor
    /// prompts.
    pub fn render_compact(&self) -> String {
        if self.steps.is_empty() {
            return "(no steps)".to_string();
        }
        let mut out = String::new();
        for step in &self.steps {
            let label = match &step.tool_name {
                Some(name) => format!("{} {}", step.kind.as_str(), name),
                None => step.kind.as_str().to_string(),
            };
            out.push_str(&format!(
                "step {} [{}]: {}\n",
                step.index,
                label,
                clip(&step.content, 240)
            ));
        }
        out
    }
}

fn clip(text: &str, max_chars: usize) -> String {
    let flat = text.replace('\n', " ");
    if flat.chars().count() <= max_chars {
        return flat;
    }
    let clipped: String = flat.chars().take(max_chars).collect();
    format!("{clipped}…")
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AppendError {
    #[error("trajectory already holds an answer step")]
    AppendAfterAnswer,
    #[error("step index {got} does not match expected {expected}")]
    IndexMismatch { expected: usize, got: usize },
    #[error("tool response must directly follow a tool call with the same tool name")]
    PairingViolation,
}

/// The strategic verdict vocabulary. The supervisor may also emit the
/// aliases Persist, Pivot, Verify and Terminate; `from_token` maps both
/// vocabularies onto this canonical set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MetaVerdict {
    Continue,
    Reflect,
    Replan,
    Verify,
    Stop,
}

impl MetaVerdict {
    pub const ALL: [MetaVerdict; 5] = [
        MetaVerdict::Continue,
        MetaVerdict::Reflect,
        MetaVerdict::Replan,
        MetaVerdict::Verify,
        MetaVerdict::Stop,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MetaVerdict::Continue => "CONTINUE",
            MetaVerdict::Reflect => "REFLECT",
            MetaVerdict::Replan => "REPLAN",
            MetaVerdict::Verify => "VERIFY",
            MetaVerdict::Stop => "STOP",
        }
    }

    /// Parses a single verdict token, accepting both vocabularies.
    pub fn from_token(token: &str) -> Option<Self> {
        match token.to_ascii_lowercase().as_str() {
            "continue" | "persist" => Some(MetaVerdict::Continue),
            "reflect" => Some(MetaVerdict::Reflect),
            "replan" | "pivot" => Some(MetaVerdict::Replan),
            "verify" => Some(MetaVerdict::Verify),
            "stop" | "terminate" => Some(MetaVerdict::Stop),
            _ => None,
        }
    }
}

/// The supervisor's end-of-turn decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaDecision {
    pub verdict: MetaVerdict,
    pub rationale: String,
    pub raised_by_trigger: bool,
}

/// The six-section context handed to the main agent each outer turn.
///
/// `token_count` is the token footprint of the canonical rendering and is
/// kept at or under the configured budget by the context manager.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextBrief {
    pub turn_id: usize,
    pub task: String,
    pub evidence: Vec<String>,
    pub constraints: Vec<String>,
    pub open_items: Vec<String>,
    pub next_actions: Vec<String>,
    pub tool_hints: Vec<String>,
    pub token_count: u64,
}

/// Per-round note: what was learned, what constrains the task, what is
/// still open. Round −1 is reserved for the initial plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteRecord {
    pub round: i64,
    pub evidence: Vec<String>,
    pub constraints: Vec<String>,
    pub open_items: Vec<String>,
}

/// Append-only cross-turn memory. Existing records are never mutated or
/// removed, and round values never decrease.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteStore {
    pub records: Vec<NoteRecord>,
}

impl NoteStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn append(&mut self, record: NoteRecord) -> Result<(), ModelError> {
        if let Some(last) = self.records.last() {
            if record.round < last.round {
                return Err(ModelError::OutOfOrderRound {
                    last: last.round,
                    got: record.round,
                });
            }
        }
        self.records.push(record);
        Ok(())
    }

    /// Serializes the store to one JSON document, written atomically
    /// (temp file + rename) so readers never observe a partial store.
    pub fn save_json(&self, path: &std::path::Path) -> std::io::Result<()> {
        let body = serde_json::to_string_pretty(self).expect("note store serializes");
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, body)?;
        std::fs::rename(&tmp, path)
    }

    pub fn load_json(path: &std::path::Path) -> std::io::Result<Self> {
        let body = std::fs::read_to_string(path)?;
        serde_json::from_str(&body)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    /// Newest-first scan for the most recent evidence bullet.
    pub fn last_evidence_bullet(&self) -> Option<&str> {
        self.records
            .iter()
            .rev()
            .find_map(|r| r.evidence.last())
            .map(String::as_str)
    }
}

/// Sampling parameters forwarded to the generation backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingParams {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_nucleus_mass")]
    pub nucleus_mass: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_temperature() -> f64 {
    0.7
}

fn default_nucleus_mass() -> f64 {
    0.95
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            nucleus_mass: 0.95,
            seed: None,
        }
    }
}

/// Execution mode: a single pipeline, or one of the parallel-sampling
/// variants (full pipeline, decision-only, brief-only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunMode {
    #[serde(rename = "single")]
    Single,
    #[serde(rename = "full-ps")]
    FullPs,
    #[serde(rename = "mt-ps")]
    MtPs,
    #[serde(rename = "cm-ps")]
    CmPs,
}

/// Run-level knobs. The JSON config file mirrors these fields exactly;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_t_max")]
    pub t_max: usize,
    #[serde(default = "default_i_max")]
    pub i_max: usize,
    #[serde(default = "default_brief_budget")]
    pub brief_token_budget: u64,
    #[serde(default = "default_retry_cap")]
    pub tool_retry_cap: u32,
    #[serde(default)]
    pub sampling: SamplingParams,
    #[serde(default = "default_mode")]
    pub mode: RunMode,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default = "default_true")]
    pub deterministic_monitor: bool,
}

fn default_t_max() -> usize {
    8
}

fn default_i_max() -> usize {
    12
}

fn default_brief_budget() -> u64 {
    300
}

fn default_retry_cap() -> u32 {
    2
}

fn default_mode() -> RunMode {
    RunMode::Single
}

fn default_n_samples() -> usize {
    1
}

fn default_true() -> bool {
    true
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            t_max: default_t_max(),
            i_max: default_i_max(),
            brief_token_budget: default_brief_budget(),
            tool_retry_cap: default_retry_cap(),
            sampling: SamplingParams::default(),
            mode: RunMode::Single,
            n_samples: 1,
            deterministic_monitor: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.t_max == 0 || self.i_max == 0 {
            return Err(ModelError::InvalidConfig(
                "t_max and i_max must be at least 1".into(),
            ));
        }
        if self.n_samples == 0 {
            return Err(ModelError::InvalidConfig(
                "n_samples must be at least 1".into(),
            ));
        }
        if self.mode == RunMode::Single && self.n_samples != 1 {
            return Err(ModelError::InvalidConfig(
                "single mode requires n_samples = 1".into(),
            ));
        }
        if self.brief_token_budget == 0 {
            return Err(ModelError::InvalidConfig(
                "brief_token_budget must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Parses the JSON config document, rejecting unknown keys, and
    /// validates the result.
    pub fn from_json(body: &str) -> Result<Self, ModelError> {
        let cfg: RunConfig =
            serde_json::from_str(body).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Why a run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    MetaStop,
    TMaxReached,
}

/// Per-component token accounting; `total` always equals the component sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenReport {
    pub main_tokens: u64,
    pub meta_tokens: u64,
    pub context_tokens: u64,
    pub synthesizer_tokens: u64,
    pub total: u64,
}

impl TokenReport {
    pub fn from_components(main: u64, meta: u64, context: u64, synthesizer: u64) -> Self {
        Self {
            main_tokens: main,
            meta_tokens: meta,
            context_tokens: context,
            synthesizer_tokens: synthesizer,
            total: main + meta + context + synthesizer,
        }
    }

    pub fn add(&self, other: &TokenReport) -> TokenReport {
        TokenReport::from_components(
            self.main_tokens + other.main_tokens,
            self.meta_tokens + other.meta_tokens,
            self.context_tokens + other.context_tokens,
            self.synthesizer_tokens + other.synthesizer_tokens,
        )
    }
}

/// One outer turn: the brief the agent worked from, the trace it produced,
/// and the supervisor's verdict on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub brief: ContextBrief,
    pub trajectory: Trajectory,
    pub decision: MetaDecision,
}

/// The outcome of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub config_hash: String,
    pub answer: String,
    pub per_turn: Vec<TurnRecord>,
    pub notes: NoteStore,
    pub tokens: TokenReport,
    pub stop_reason: StopReason,
}

impl RunResult {
    /// Total tool calls across all turns; used by the distillation filters.
    pub fn tool_call_count(&self) -> usize {
        self.per_turn
            .iter()
            .map(|t| {
                t.trajectory
                    .steps
                    .iter()
                    .filter(|s| s.kind == StepKind::ToolCall)
                    .count()
            })
            .sum()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("query text is empty")]
    EmptyQueryText,
    #[error("tool_name must be present exactly for tool steps (kind {kind:?})")]
    ToolNameMismatch { kind: StepKind },
    #[error("note round {got} is lower than the last stored round {last}")]
    OutOfOrderRound { last: i64, got: i64 },
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
}
