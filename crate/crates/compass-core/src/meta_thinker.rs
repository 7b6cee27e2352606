//! Strategic oversight: initial planning, anomaly/completion monitoring
//! over the trajectory step stream, and end-of-turn decision production.
//!
//! Monitoring is hybrid: deterministic rules raise the trigger flag, and
//! the nuanced persist/pivot judgment is a single completion per turn.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use regex::Regex;
use thiserror::Error;

use crate::context_manager::render_brief;
use crate::gateway::{ChatMessage, ChatRequest, Component, Gateway, GatewayError};
use crate::model::{
    ContextBrief, MetaDecision, MetaVerdict, NoteRecord, NoteStore, Query, SamplingParams,
    StepKind, Trajectory, TrajectoryStep,
};
use crate::tools::TOOL_ERROR_PREFIX;

/// Why the monitor fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TriggerReason {
    Looping,
    ToolMisuse,
    ReasoningDrift,
    CompletionSignal,
}

/// Detection thresholds. Drift defaults to twice the looping window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TriggerConfig {
    /// Identical consecutive tool calls before `Looping` fires.
    pub looping_k: usize,
    /// Consecutive failed tool results before `ToolMisuse` fires.
    pub misuse_m: usize,
    /// Consecutive thought-only steps before `ReasoningDrift` fires.
    pub drift_len: usize,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        Self {
            looping_k: 3,
            misuse_m: 3,
            drift_len: 6,
        }
    }
}

/// Rule-engine state for one turn. The flag transitions false→true at most
/// once per turn and `observe` is idempotent per step index.
#[derive(Debug, Clone, Default)]
pub struct MonitorState {
    pub triggered: bool,
    pub trigger_reason: Option<TriggerReason>,
    pub observed_count: usize,
    last_index: Option<usize>,
    last_call: Option<(String, String)>,
    call_repeat: usize,
    consecutive_failures: usize,
    consecutive_thoughts: usize,
}

impl MonitorState {
    pub fn is_triggered(&self) -> bool {
        self.triggered
    }

    fn trigger(&mut self, reason: TriggerReason) {
        if !self.triggered {
            self.triggered = true;
            self.trigger_reason = Some(reason);
        }
    }
}

/// Folds one observed step into the state, firing trigger rules.
pub fn observe(state: &mut MonitorState, config: &TriggerConfig, step: &TrajectoryStep) {
    if state.last_index.is_some_and(|last| step.index <= last) {
        return; // already observed
    }
    state.last_index = Some(step.index);
    state.observed_count += 1;
    if state.triggered {
        return; // single trigger per turn
    }
    match step.kind {
        StepKind::Answer => state.trigger(TriggerReason::CompletionSignal),
        StepKind::Thought => {
            state.consecutive_thoughts += 1;
            if state.consecutive_thoughts >= config.drift_len {
                state.trigger(TriggerReason::ReasoningDrift);
            }
        }
        StepKind::ToolCall => {
            state.consecutive_thoughts = 0;
            let signature = (
                step.tool_name.clone().unwrap_or_default(),
                step.content.clone(),
            );
            if state.last_call.as_ref() == Some(&signature) {
                state.call_repeat += 1;
            } else {
                state.last_call = Some(signature);
                state.call_repeat = 1;
            }
            if state.call_repeat >= config.looping_k {
                state.trigger(TriggerReason::Looping);
            }
        }
        StepKind::ToolResponse => {
            state.consecutive_thoughts = 0;
            if step.content.starts_with(TOOL_ERROR_PREFIX) {
                state.consecutive_failures += 1;
                if state.consecutive_failures >= config.misuse_m {
                    state.trigger(TriggerReason::ToolMisuse);
                }
            } else {
                state.consecutive_failures = 0;
            }
        }
    }
}

/// Owns the monitor across a turn. In deterministic mode, steps are folded
/// inline at publish time; in concurrent mode a worker thread consumes the
/// append stream so publishing never blocks. Both modes expose the same
/// flag read at the same loop boundaries; `stop` drains the stream before
/// returning so the final state always reflects every published step.
pub struct MonitorHandle {
    config: TriggerConfig,
    deterministic: bool,
    flag: Arc<AtomicBool>,
    state: Arc<Mutex<MonitorState>>,
    sender: Option<mpsc::Sender<TrajectoryStep>>,
    worker: Option<JoinHandle<()>>,
}

impl MonitorHandle {
    pub fn new(config: TriggerConfig, deterministic: bool) -> Self {
        Self {
            config,
            deterministic,
            flag: Arc::new(AtomicBool::new(false)),
            state: Arc::new(Mutex::new(MonitorState::default())),
            sender: None,
            worker: None,
        }
    }

    /// Resets per-turn state and, in concurrent mode, starts the observer
    /// thread on the step stream.
    pub fn start_turn(&mut self) {
        self.finish_worker();
        *self.state.lock().expect("monitor state lock") = MonitorState::default();
        self.flag.store(false, Ordering::SeqCst);
        if !self.deterministic {
            let (tx, rx) = mpsc::channel::<TrajectoryStep>();
            let state = Arc::clone(&self.state);
            let flag = Arc::clone(&self.flag);
            let config = self.config;
            self.worker = Some(std::thread::spawn(move || {
                for step in rx {
                    let mut guard = state.lock().expect("monitor state lock");
                    observe(&mut guard, &config, &step);
                    if guard.triggered {
                        flag.store(true, Ordering::SeqCst);
                    }
                }
            }));
            self.sender = Some(tx);
        }
    }

    /// Publishes one appended step to the monitor. Never blocks the caller.
    pub fn publish(&self, step: &TrajectoryStep) {
        if self.deterministic {
            let mut guard = self.state.lock().expect("monitor state lock");
            observe(&mut guard, &self.config, step);
            if guard.triggered {
                self.flag.store(true, Ordering::SeqCst);
            }
        } else if let Some(sender) = &self.sender {
            let _ = sender.send(step.clone());
        }
    }

    /// Lock-free flag read; safe from the inner loop at iteration boundaries.
    pub fn is_triggered(&self) -> bool {
        self.flag.load(Ordering::SeqCst)
    }

    /// Stops monitoring, draining the stream, and returns the final state.
    pub fn stop(&mut self) -> MonitorState {
        self.finish_worker();
        self.state.lock().expect("monitor state lock").clone()
    }

    /// State snapshot after the turn has been stopped.
    pub fn snapshot(&self) -> MonitorState {
        self.state.lock().expect("monitor state lock").clone()
    }

    fn finish_worker(&mut self) {
        self.sender = None; // closes the channel
        if let Some(worker) = self.worker.take() {
            let _ = worker.join();
        }
    }
}

impl Drop for MonitorHandle {
    fn drop(&mut self) {
        self.finish_worker();
    }
}

// ---------------------------------------------------------------------------
// Planning and decisions
// ---------------------------------------------------------------------------

const PLANNER_SYSTEM: &str = "You plan research tasks. Write a short numbered plan \
(2-6 steps) for answering the task below. One step per line, nothing else.";

/// Seeds the note store with the initial plan (round −1). An empty or
/// unusable plan falls back to a single open item holding the query text.
pub fn initialize(
    query: &Query,
    gateway: &Gateway,
    sampling: &SamplingParams,
) -> Result<NoteStore, GatewayError> {
    let request = ChatRequest::new(vec![
        ChatMessage::system(PLANNER_SYSTEM),
        ChatMessage::user(format!("Task: {}", query.text)),
    ])
    .with_sampling(sampling);
    let response = gateway.complete(Component::Meta, &request)?;
    let mut plan = parse_plan_lines(&response.text);
    plan.truncate(6);
    if plan.is_empty() {
        plan = vec![query.text.clone()];
    }
    let mut store = NoteStore::new();
    store
        .append(NoteRecord {
            round: -1,
            evidence: vec![],
            constraints: vec![],
            open_items: plan,
        })
        .expect("first record always appends");
    Ok(store)
}

fn parse_plan_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(strip_bullet)
        .filter(|line| !line.is_empty())
        .map(str::to_string)
        .collect()
}

pub(crate) fn strip_bullet(line: &str) -> &str {
    let line = line.trim();
    let stripped = line
        .strip_prefix("- ")
        .or_else(|| line.strip_prefix("* "))
        .or_else(|| line.strip_prefix("• "))
        .unwrap_or(line);
    // numbered prefixes like "3." or "3)"
    let mut chars = stripped.char_indices().peekable();
    let mut digits = 0;
    while let Some((_, c)) = chars.peek() {
        if c.is_ascii_digit() {
            digits += 1;
            chars.next();
        } else {
            break;
        }
    }
    if digits > 0 {
        if let Some((i, c)) = chars.next() {
            if c == '.' || c == ')' {
                return stripped[i + 1..].trim();
            }
        }
    }
    stripped.trim()
}

const DECISION_SYSTEM: &str = "You supervise a research agent between turns. Review the \
context brief, the turn's steps, and any monitor alert, then judge whether the current \
approach should go on, be reconsidered, be checked, or end. Reply with exactly one verdict \
token — CONTINUE, REFLECT, REPLAN, VERIFY, or STOP (Persist, Pivot, Verify, and Terminate \
are accepted aliases) — followed by a one-line rationale.";

/// Issues the single end-of-turn supervision completion and parses the
/// verdict, accepting both vocabularies.
pub fn get_decision(
    trajectory: &Trajectory,
    brief: &ContextBrief,
    monitor: &MonitorState,
    gateway: &Gateway,
    sampling: &SamplingParams,
) -> Result<MetaDecision, MetaError> {
    let alert = match monitor.trigger_reason {
        Some(reason) => format!("{reason:?}"),
        None => "none".to_string(),
    };
    let user = format!(
        "Context brief:\n{}\nTurn steps:\n{}\nMonitor alert: {}",
        render_brief(brief),
        trajectory.render_compact(),
        alert
    );
    let request = ChatRequest::new(vec![
        ChatMessage::system(DECISION_SYSTEM),
        ChatMessage::user(user),
    ])
    .with_sampling(sampling);
    let response = gateway.complete(Component::Meta, &request)?;
    let (verdict, rationale) =
        parse_verdict(&response.text).ok_or_else(|| MetaError::DecisionParse {
            raw: response.text.clone(),
        })?;
    Ok(MetaDecision {
        verdict,
        rationale,
        raised_by_trigger: monitor.triggered,
    })
}

/// Finds the first verdict token in the text (either vocabulary) and
/// returns it with the surrounding text as rationale.
pub fn parse_verdict(text: &str) -> Option<(MetaVerdict, String)> {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"(?i)\b(continue|reflect|replan|verify|stop|persist|pivot|terminate)\b")
            .expect("verdict regex compiles")
    });
    let m = re.find(text)?;
    let verdict = MetaVerdict::from_token(m.as_str()).expect("matched token maps");
    let after = text[m.end()..]
        .trim_start_matches([':', ',', '-', '—', ' ', '\t'])
        .trim();
    let before = text[..m.start()].trim();
    let rationale = if !after.is_empty() {
        after.to_string()
    } else if !before.is_empty() {
        before.to_string()
    } else {
        text.trim().to_string()
    };
    Some((verdict, rationale))
}

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("no recognizable verdict token in {raw:?}")]
    DecisionParse { raw: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptedFixture;

    fn step(index: usize, kind: StepKind, content: &str, tool: Option<&str>) -> TrajectoryStep {
        TrajectoryStep::new(index, kind, content, tool.map(str::to_string), 1).unwrap()
    }

    #[test]
    fn looping_rule_fires_on_three_identical_calls() {
        let cfg = TriggerConfig::default();
        let mut state = MonitorState::default();
        observe(
            &mut state,
            &cfg,
            &step(0, StepKind::ToolCall, "q", Some("search")),
        );
        observe(
            &mut state,
            &cfg,
            &step(1, StepKind::ToolResponse, "r", Some("search")),
        );
        observe(
            &mut state,
            &cfg,
            &step(2, StepKind::ToolCall, "q", Some("search")),
        );
        observe(
            &mut state,
            &cfg,
            &step(3, StepKind::ToolResponse, "r", Some("search")),
        );
        assert!(!state.triggered);
        observe(
            &mut state,
            &cfg,
            &step(4, StepKind::ToolCall, "q", Some("search")),
        );
        assert!(state.triggered);
        assert_eq!(state.trigger_reason, Some(TriggerReason::Looping));
    }

    #[test]
    fn completion_signal_on_answer() {
        let mut state = MonitorState::default();
        observe(
            &mut state,
            &TriggerConfig::default(),
            &step(0, StepKind::Answer, "done", None),
        );
        assert!(state.triggered);
        assert_eq!(state.trigger_reason, Some(TriggerReason::CompletionSignal));
    }

    #[test]
    fn ordinary_thought_does_not_trigger() {
        let mut state = MonitorState::default();
        observe(
            &mut state,
            &TriggerConfig::default(),
            &step(0, StepKind::Thought, "hm", None),
        );
        assert!(!state.triggered);
        assert_eq!(state.observed_count, 1);
    }

    #[test]
    fn tool_misuse_after_consecutive_failures() {
        let cfg = TriggerConfig::default();
        let mut state = MonitorState::default();
        let mut idx = 0;
        for _ in 0..3 {
            let body = format!("q{idx}");
            observe(
                &mut state,
                &cfg,
                &step(idx, StepKind::ToolCall, &body, Some("browse")),
            );
            idx += 1;
            let diag = format!("{TOOL_ERROR_PREFIX} no page");
            observe(
                &mut state,
                &cfg,
                &step(idx, StepKind::ToolResponse, &diag, Some("browse")),
            );
            idx += 1;
        }
        assert_eq!(state.trigger_reason, Some(TriggerReason::ToolMisuse));
    }

    #[test]
    fn drift_after_thought_run() {
        let cfg = TriggerConfig::default();
        let mut state = MonitorState::default();
        for i in 0..6 {
            observe(&mut state, &cfg, &step(i, StepKind::Thought, "…", None));
        }
        assert_eq!(state.trigger_reason, Some(TriggerReason::ReasoningDrift));
    }

    #[test]
    fn observe_idempotent_per_index() {
        let cfg = TriggerConfig::default();
        let mut state = MonitorState::default();
        let s = step(0, StepKind::Thought, "x", None);
        observe(&mut state, &cfg, &s);
        observe(&mut state, &cfg, &s);
        assert_eq!(state.observed_count, 1);
    }

    #[test]
    fn single_trigger_per_turn() {
        let cfg = TriggerConfig::default();
        let mut state = MonitorState::default();
        observe(&mut state, &cfg, &step(0, StepKind::Answer, "a", None));
        let reason = state.trigger_reason;
        // further anomalies do not overwrite the first trigger
        for i in 1..10 {
            observe(&mut state, &cfg, &step(i, StepKind::Thought, "x", None));
        }
        assert!(state.triggered);
        assert_eq!(state.trigger_reason, reason);
    }

    #[test]
    fn is_triggered_is_a_pure_read() {
        let handle = MonitorHandle::new(TriggerConfig::default(), true);
        assert!(!handle.is_triggered());
        assert!(!handle.is_triggered());
    }

    #[test]
    fn concurrent_mode_observes_everything_by_stop() {
        let mut handle = MonitorHandle::new(TriggerConfig::default(), false);
        handle.start_turn();
        for i in 0..4 {
            let body = "same".to_string();
            handle.publish(&step(i, StepKind::ToolCall, &body, Some("search")));
        }
        let state = handle.stop();
        assert_eq!(state.observed_count, 4);
        assert!(state.triggered);
    }

    #[test]
    fn deterministic_and_concurrent_agree_without_triggers() {
        let steps: Vec<TrajectoryStep> = (0..5)
            .map(|i| step(i, StepKind::Thought, &format!("t{i}"), None))
            .collect();
        let mut det = MonitorHandle::new(TriggerConfig::default(), true);
        det.start_turn();
        steps.iter().for_each(|s| det.publish(s));
        let det_state = det.stop();
        let mut conc = MonitorHandle::new(TriggerConfig::default(), false);
        conc.start_turn();
        steps.iter().for_each(|s| conc.publish(s));
        let conc_state = conc.stop();
        assert_eq!(det_state.observed_count, conc_state.observed_count);
        assert_eq!(det_state.triggered, conc_state.triggered);
    }

    #[test]
    fn initialize_parses_plan() {
        let gw = Gateway::scripted(
            ScriptedFixture::default()
                .with_entry("meta:0", "1. look up A\n2. cross-check B\n3. conclude"),
        );
        let q = Query::new("q1", "who did it?").unwrap();
        let store = initialize(&q, &gw, &SamplingParams::default()).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(store.records[0].round, -1);
        assert_eq!(store.records[0].open_items.len(), 3);
        assert_eq!(store.records[0].open_items[0], "look up A");
    }

    #[test]
    fn initialize_empty_plan_falls_back_to_query() {
        let gw = Gateway::scripted(ScriptedFixture::default().with_entry("meta:0", "   \n"));
        let q = Query::new("q1", "who did it?").unwrap();
        let store = initialize(&q, &gw, &SamplingParams::default()).unwrap();
        assert_eq!(store.records[0].open_items, vec!["who did it?".to_string()]);
    }

    #[test]
    fn initialize_deterministic_for_same_fixture() {
        let fixture = ScriptedFixture::default().with_entry("meta:0", "1. a\n2. b");
        let q = Query::new("q1", "task").unwrap();
        let a = initialize(
            &q,
            &Gateway::scripted(fixture.clone()),
            &SamplingParams::default(),
        )
        .unwrap();
        let b = initialize(&q, &Gateway::scripted(fixture), &SamplingParams::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn verdict_parsing_examples() {
        assert_eq!(parse_verdict("Terminate").unwrap().0, MetaVerdict::Stop);
        let (v, rationale) = parse_verdict("REPLAN: source exhausted").unwrap();
        assert_eq!(v, MetaVerdict::Replan);
        assert_eq!(rationale, "source exhausted");
        assert!(parse_verdict("maybe keep going?").is_none());
    }

    #[test]
    fn get_decision_maps_aliases_and_mirrors_trigger() {
        let gw = Gateway::scripted(
            ScriptedFixture::default().with_entry("meta:0", "Terminate — enough evidence"),
        );
        let brief = crate::context_manager::tests_support::minimal_brief("find it");
        let monitor = MonitorState {
            triggered: true,
            trigger_reason: Some(TriggerReason::CompletionSignal),
            ..MonitorState::default()
        };
        let decision = get_decision(
            &Trajectory::new(0),
            &brief,
            &monitor,
            &gw,
            &SamplingParams::default(),
        )
        .unwrap();
        assert_eq!(decision.verdict, MetaVerdict::Stop);
        assert!(decision.raised_by_trigger);
    }

    #[test]
    fn get_decision_parse_error_on_gibberish() {
        let gw =
            Gateway::scripted(ScriptedFixture::default().with_entry("meta:0", "maybe keep going?"));
        let brief = crate::context_manager::tests_support::minimal_brief("find it");
        let err = get_decision(
            &Trajectory::new(0),
            &brief,
            &MonitorState::default(),
            &gw,
            &SamplingParams::default(),
        )
        .unwrap_err();
        assert!(matches!(err, MetaError::DecisionParse { .. }));
    }
}
