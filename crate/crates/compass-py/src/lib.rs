//! Python bindings for the compass engine.
//!
//! Exposes the pure operations (token counting, brief and output parsing,
//! scoring, pair construction, metrics) as module functions and the full
//! engine as a `Runner` class. Structured values cross the boundary as
//! JSON strings so Python sees plain dicts after `json.loads`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use compass_core::context_manager;
use compass_core::distillation::{self, CandidateOutcome, PairConfig};
use compass_core::evaluation::{self, DecisionJudgment, Verdict};
use compass_core::gateway::{Gateway, ScriptedFixture};
use compass_core::main_agent::{self, AgentAction};
use compass_core::model::{ContextBrief, Query, RunConfig, RunMode, TokenReport};
use compass_core::orchestrator;
use compass_core::runlog;
use compass_core::tools::{mock_registry, MockCorpus, ToolRegistry};

fn value_err(err: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(err.to_string())
}

fn runtime_err(err: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(err.to_string())
}

fn to_json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string(value).map_err(runtime_err)
}

/// ceil(chars / 4) token heuristic used across the engine.
#[pyfunction]
fn count_tokens(text: &str) -> u64 {
    compass_core::gateway::count_tokens(text)
}

/// Parses a six-section context brief; returns a JSON object string.
/// Raises ValueError when the Task or Next Actions section is missing.
#[pyfunction]
fn parse_brief(text: &str) -> PyResult<String> {
    let brief = context_manager::parse_brief(text).map_err(value_err)?;
    to_json(&brief)
}

/// Renders a brief (JSON object string) back to its canonical text.
#[pyfunction]
fn render_brief(brief_json: &str) -> PyResult<String> {
    let brief: ContextBrief = serde_json::from_str(brief_json).map_err(value_err)?;
    Ok(context_manager::render_brief(&brief))
}

/// Splits a raw model completion into thought/action; returns JSON.
#[pyfunction]
fn parse_output(text: &str) -> PyResult<String> {
    let parsed = main_agent::parse_output(text);
    let action = match &parsed.action {
        AgentAction::ToolCall(record) => serde_json::json!({
            "type": "tool_call",
            "tool_name": record.tool_name,
            "arguments": record.arguments,
            "raw_text": record.raw_text,
        }),
        AgentAction::FinalAnswer(answer) => {
            serde_json::json!({"type": "final_answer", "text": answer})
        }
        AgentAction::BareText(text) => serde_json::json!({"type": "bare_text", "text": text}),
    };
    to_json(&serde_json::json!({
        "thought": parsed.thought,
        "action": action,
        "ignored_tool_calls": parsed.ignored_tool_calls,
    }))
}

/// Success indicator minus 0.001 per token.
#[pyfunction]
fn composite_score(success: bool, tokens: u64) -> f64 {
    distillation::composite_score(success, tokens)
}

/// Builds preference pairs from candidates (JSON array of
/// {label, brief, success, tokens}); returns a JSON array of pairs.
#[pyfunction]
#[pyo3(signature = (candidates_json, all_pairs = true))]
fn build_preference_pairs(candidates_json: &str, all_pairs: bool) -> PyResult<String> {
    #[derive(serde::Deserialize)]
    struct RawCandidate {
        label: usize,
        brief: ContextBrief,
        success: bool,
        tokens: u64,
    }
    let raw: Vec<RawCandidate> = serde_json::from_str(candidates_json).map_err(value_err)?;
    let candidates: Vec<CandidateOutcome> = raw
        .into_iter()
        .map(|c| CandidateOutcome::new(c.label, c.brief, c.success, c.tokens))
        .collect();
    let config = PairConfig {
        all_pairs,
        ..PairConfig::default()
    };
    to_json(&distillation::build_preference_pairs(&candidates, &config))
}

/// Aggregates verdicts and judgments (JSON arrays) plus a token report
/// into a metrics report (JSON object).
#[pyfunction]
fn compute_metrics(
    verdicts_json: &str,
    judgments_json: &str,
    tokens_json: &str,
) -> PyResult<String> {
    let verdicts: Vec<Verdict> = serde_json::from_str(verdicts_json).map_err(value_err)?;
    let judgments: Vec<DecisionJudgment> =
        serde_json::from_str(judgments_json).map_err(value_err)?;
    let tokens: TokenReport = serde_json::from_str(tokens_json).map_err(value_err)?;
    to_json(&evaluation::compute_metrics(&verdicts, &judgments, tokens))
}

/// Deterministic answer check used by the grading fast path.
#[pyfunction]
fn answers_match(candidate: &str, gold: &str) -> bool {
    evaluation::answers_match(candidate, gold)
}

/// The engine behind a scripted backend, driven from Python.
#[pyclass]
struct Runner {
    config: RunConfig,
    gateway: Gateway,
    registry: ToolRegistry,
}

#[pymethods]
impl Runner {
    /// Builds a runner from a config JSON string, a scripted fixture
    /// path, and an optional tool-corpus path.
    #[new]
    #[pyo3(signature = (config_json, fixture_path, corpus_path = None))]
    fn new(config_json: &str, fixture_path: &str, corpus_path: Option<&str>) -> PyResult<Self> {
        let config = RunConfig::from_json(config_json).map_err(value_err)?;
        let fixture =
            ScriptedFixture::from_path(std::path::Path::new(fixture_path)).map_err(value_err)?;
        let corpus = match corpus_path {
            Some(path) => MockCorpus::from_path(std::path::Path::new(path)).map_err(value_err)?,
            None => MockCorpus::default(),
        };
        Ok(Self {
            config,
            gateway: Gateway::scripted(fixture),
            registry: mock_registry(corpus),
        })
    }

    /// Runs one query; returns the full result as a JSON object string.
    /// Writes an event log when `log_path` is given.
    #[pyo3(signature = (query_id, query_text, log_path = None))]
    fn run(&self, query_id: &str, query_text: &str, log_path: Option<&str>) -> PyResult<String> {
        let query = Query::new(query_id, query_text).map_err(value_err)?;
        let gateway = self.gateway.for_run();
        let registry = self.registry.for_run();
        let result = match self.config.mode {
            RunMode::Single => orchestrator::run(&query, &self.config, &gateway, &registry),
            _ => orchestrator::run_tts(&query, &self.config, &gateway, &registry),
        }
        .map_err(runtime_err)?;
        if let Some(path) = log_path {
            runlog::persist_run(&result, &query, std::path::Path::new(path))
                .map_err(runtime_err)?;
        }
        to_json(&result)
    }
}

/// Replays a persisted run log; returns {query, result} as JSON.
#[pyfunction]
fn replay(log_path: &str) -> PyResult<String> {
    let replayed = runlog::replay_run(std::path::Path::new(log_path)).map_err(value_err)?;
    to_json(&serde_json::json!({
        "query": replayed.query,
        "result": replayed.result,
    }))
}

#[pymodule]
fn compass_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(count_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(parse_brief, m)?)?;
    m.add_function(wrap_pyfunction!(render_brief, m)?)?;
    m.add_function(wrap_pyfunction!(parse_output, m)?)?;
    m.add_function(wrap_pyfunction!(composite_score, m)?)?;
    m.add_function(wrap_pyfunction!(build_preference_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(answers_match, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    m.add_class::<Runner>()?;
    Ok(())
}
