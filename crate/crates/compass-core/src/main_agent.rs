//! The tactical inner loop: prompt assembly from a context brief, step
//! generation, tool-call parsing and dispatch, answer detection, and
//! monitor trigger checks at iteration boundaries.
//!
//! The prompt carries only the current turn's steps; cross-turn memory
//! flows exclusively through briefs and notes.

use regex::Regex;
use std::sync::OnceLock;

use crate::context_manager::render_brief;
use crate::gateway::{count_tokens, ChatMessage, ChatRequest, Component, Gateway, GatewayError};
use crate::meta_thinker::MonitorHandle;
use crate::model::{
    ContextBrief, SamplingParams, StaticContext, StepKind, Trajectory, TrajectoryStep,
};
use crate::tools::{ToolCallRecord, ToolRegistry, ToolResult, ToolSpec, TOOL_ERROR_PREFIX};

/// Default instructions for the main agent.
pub const DEFAULT_SYSTEM_INSTRUCTIONS: &str = "You work on the task described in the context \
brief below through an iterative loop of reasoning, tool use, and observation. Each reply: \
read the brief, explain in a <think>…</think> block why your chosen action helps, then emit \
exactly one of\n\
  <tool_call name=\"TOOL\">arguments</tool_call>   — run one tool (never more than one per reply)\n\
  <answer>final answer</answer>                  — finish once the task is satisfied.\n\
Focus on tactical execution with the curated context you are given; do not monitor or judge \
overall progress yourself.";

/// What one action the model chose.
#[derive(Debug, Clone, PartialEq)]
pub enum AgentAction {
    ToolCall(ToolCallRecord),
    FinalAnswer(String),
    BareText(String),
}

/// A model output split into its optional thought and exactly one action.
/// `ignored_tool_calls` counts extra calls beyond the first.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedModelOutput {
    pub thought: Option<String>,
    pub action: AgentAction,
    pub ignored_tool_calls: usize,
}

fn think_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)<think>(.*?)</think>").expect("think regex"))
}

fn answer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)<answer>(.*?)</answer>").expect("answer regex"))
}

fn tool_call_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"(?s)<tool_call\s+name="([^"]+)"\s*>(.*?)</tool_call>"#).expect("tool regex")
    })
}

/// Parses a raw completion into thought + action. A final answer wins over
/// a tool call when both are present; unparseable text degrades to
/// `BareText` rather than erroring.
pub fn parse_output(text: &str) -> ParsedModelOutput {
    let thought = think_re()
        .captures(text)
        .and_then(|c| c.get(1))
        .map(|m| m.as_str().trim().to_string())
        .filter(|s| !s.is_empty());

    if let Some(answer) = answer_re().captures(text).and_then(|c| c.get(1)) {
        return ParsedModelOutput {
            thought,
            action: AgentAction::FinalAnswer(answer.as_str().trim().to_string()),
            ignored_tool_calls: 0,
        };
    }

    let mut calls = tool_call_re().captures_iter(text);
    if let Some(first) = calls.next() {
        let name = first.get(1).expect("tool name").as_str();
        let body = first.get(2).expect("tool body").as_str();
        return ParsedModelOutput {
            thought,
            action: AgentAction::ToolCall(ToolCallRecord::from_body(name, body)),
            ignored_tool_calls: calls.count(),
        };
    }

    // strip the consumed think block; whatever remains is bare text
    let remainder = think_re().replace(text, "").trim().to_string();
    ParsedModelOutput {
        thought,
        action: AgentAction::BareText(remainder),
        ignored_tool_calls: 0,
    }
}

/// True iff the trajectory's last step is an answer.
pub fn has_final_answer(trajectory: &Trajectory) -> bool {
    trajectory.has_final_answer()
}

fn render_tool_specs(specs: &[ToolSpec]) -> String {
    if specs.is_empty() {
        return "(no tools registered)".to_string();
    }
    specs
        .iter()
        .map(|spec| {
            let params = spec
                .parameters
                .iter()
                .map(|p| p.name.as_str())
                .collect::<Vec<_>>()
                .join(", ");
            format!("- {}({}): {}", spec.name, params, spec.description)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Assembles the request for the next model step: system instructions,
/// then the rendered brief with the tool catalogue, then one message per
/// step of the current turn only, never prior-turn raw history.
pub fn build_prompt(
    brief: &ContextBrief,
    trajectory_so_far: &Trajectory,
    static_ctx: &StaticContext,
    sampling: &SamplingParams,
) -> ChatRequest {
    let mut messages = vec![
        ChatMessage::system(static_ctx.system_instructions.clone()),
        ChatMessage::user(format!(
            "{}\nAvailable tools:\n{}",
            render_brief(brief),
            render_tool_specs(&static_ctx.tool_specs)
        )),
    ];
    for step in &trajectory_so_far.steps {
        let message = match step.kind {
            StepKind::Thought => ChatMessage::assistant(format!("<think>{}</think>", step.content)),
            StepKind::ToolCall => ChatMessage::assistant(format!(
                "<tool_call name=\"{}\">{}</tool_call>",
                step.tool_name.as_deref().unwrap_or_default(),
                step.content
            )),
            StepKind::ToolResponse => ChatMessage::user(format!(
                "<tool_response>\n{}\n</tool_response>",
                step.content
            )),
            StepKind::Answer => {
                ChatMessage::assistant(format!("<answer>{}</answer>", step.content))
            }
        };
        messages.push(message);
    }
    ChatRequest::new(messages).with_sampling(sampling)
}

/// Everything the inner loop needs besides the brief and the monitor.
pub struct TurnEnv<'a> {
    pub gateway: &'a Gateway,
    pub registry: &'a ToolRegistry,
    pub static_ctx: &'a StaticContext,
    pub sampling: SamplingParams,
    pub i_max: usize,
    pub tool_retry_cap: u32,
}

/// Runs the inner loop for one turn: up to `i_max` model steps, exiting
/// early when the monitor triggers or a final answer appears. Monitoring
/// starts on the fresh trajectory and is stopped before returning; tool
/// errors are absorbed as observations while backend errors propagate.
pub fn execute_turn(
    env: &TurnEnv,
    turn_id: usize,
    brief: &ContextBrief,
    monitor: &mut MonitorHandle,
) -> Result<Trajectory, GatewayError> {
    let mut trajectory = Trajectory::new(turn_id);
    monitor.start_turn();
    let outcome = run_inner_loop(env, brief, monitor, &mut trajectory);
    monitor.stop();
    outcome.map(|_| trajectory)
}

fn run_inner_loop(
    env: &TurnEnv,
    brief: &ContextBrief,
    monitor: &MonitorHandle,
    trajectory: &mut Trajectory,
) -> Result<(), GatewayError> {
    for _ in 0..env.i_max {
        if monitor.is_triggered() || trajectory.has_final_answer() {
            break;
        }
        let request = build_prompt(brief, trajectory, env.static_ctx, &env.sampling);
        let response = env.gateway.complete(Component::Main, &request)?;
        let parsed = parse_output(&response.text);

        if let Some(thought) = &parsed.thought {
            push_step(
                trajectory,
                monitor,
                StepKind::Thought,
                thought.clone(),
                None,
            );
        }
        match parsed.action {
            AgentAction::FinalAnswer(answer) => {
                push_step(trajectory, monitor, StepKind::Answer, answer, None);
            }
            AgentAction::BareText(text) => {
                // a pure think block already consumed this iteration
                if !(text.is_empty() && parsed.thought.is_some()) {
                    push_step(trajectory, monitor, StepKind::Thought, text, None);
                }
            }
            AgentAction::ToolCall(record) => {
                let mut content = record.raw_text.clone();
                if parsed.ignored_tool_calls > 0 {
                    content.push_str(&format!(
                        "\n[warning: {} additional tool call(s) ignored; one tool per step]",
                        parsed.ignored_tool_calls
                    ));
                }
                let tool_name = record.tool_name.clone();
                push_step(
                    trajectory,
                    monitor,
                    StepKind::ToolCall,
                    content,
                    Some(tool_name.clone()),
                );

                let result = match env.registry.invoke(&record, env.tool_retry_cap) {
                    Ok(result) => result,
                    Err(err) => ToolResult {
                        content: err.to_string(),
                        success: false,
                        retries_used: 0,
                    },
                };
                let observation = if result.success {
                    result.content
                } else {
                    format!("{TOOL_ERROR_PREFIX} {}", result.content)
                };
                push_step(
                    trajectory,
                    monitor,
                    StepKind::ToolResponse,
                    observation,
                    Some(tool_name),
                );
            }
        }
    }
    Ok(())
}

fn push_step(
    trajectory: &mut Trajectory,
    monitor: &MonitorHandle,
    kind: StepKind,
    content: String,
    tool_name: Option<String>,
) {
    let token_count = count_tokens(&content);
    let step = TrajectoryStep::new(trajectory.len(), kind, content, tool_name, token_count)
        .expect("loop constructs well-formed steps");
    trajectory
        .append_step(step.clone())
        .expect("loop preserves trajectory invariants");
    monitor.publish(&step);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context_manager::tests_support::minimal_brief;
    use crate::gateway::ScriptedFixture;
    use crate::meta_thinker::TriggerConfig;
    use crate::model::Query;
    use crate::tools::{mock_registry, MockCorpus};

    #[test]
    fn parse_think_plus_tool_call() {
        let parsed = parse_output("<think>x</think><tool_call name=\"search\">q</tool_call>");
        assert_eq!(parsed.thought.as_deref(), Some("x"));
        match parsed.action {
            AgentAction::ToolCall(record) => {
                assert_eq!(record.tool_name, "search");
                assert_eq!(record.raw_text, "q");
            }
            other => panic!("expected tool call, got {other:?}"),
        }
    }

    #[test]
    fn parse_answer() {
        let parsed = parse_output("<answer>Ireland v Romania</answer>");
        assert_eq!(
            parsed.action,
            AgentAction::FinalAnswer("Ireland v Romania".into())
        );
    }

    #[test]
    fn parse_bare_text() {
        let parsed = parse_output("hello");
        assert_eq!(parsed.action, AgentAction::BareText("hello".into()));
        assert!(parsed.thought.is_none());
    }

    #[test]
    fn answer_wins_over_tool_call() {
        let parsed = parse_output("<tool_call name=\"search\">q</tool_call><answer>done</answer>");
        assert_eq!(parsed.action, AgentAction::FinalAnswer("done".into()));
    }

    #[test]
    fn extra_tool_calls_counted() {
        let parsed = parse_output(
            "<tool_call name=\"search\">a</tool_call><tool_call name=\"browse\">b</tool_call>",
        );
        assert_eq!(parsed.ignored_tool_calls, 1);
        match parsed.action {
            AgentAction::ToolCall(record) => assert_eq!(record.tool_name, "search"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_render_round_trip_on_tagged_output() {
        for text in [
            "<think>a</think><tool_call name=\"search\">q one</tool_call>",
            "<think>b</think><answer>final</answer>",
            "<answer>42</answer>",
        ] {
            let parsed = parse_output(text);
            let rendered = match (&parsed.thought, &parsed.action) {
                (Some(t), AgentAction::ToolCall(r)) => format!(
                    "<think>{t}</think><tool_call name=\"{}\">{}</tool_call>",
                    r.tool_name, r.raw_text
                ),
                (Some(t), AgentAction::FinalAnswer(a)) => {
                    format!("<think>{t}</think><answer>{a}</answer>")
                }
                (None, AgentAction::FinalAnswer(a)) => format!("<answer>{a}</answer>"),
                other => panic!("unexpected {other:?}"),
            };
            assert_eq!(parse_output(&rendered), parsed);
            assert_eq!(rendered, text);
        }
    }

    fn static_ctx() -> StaticContext {
        StaticContext::new(
            Query::new("q", "task").unwrap(),
            crate::tools::builtin_tool_specs(),
            DEFAULT_SYSTEM_INSTRUCTIONS.to_string(),
        )
    }

    #[test]
    fn final_answer_detection() {
        let mut trajectory = Trajectory::new(0);
        assert!(!has_final_answer(&trajectory));
        trajectory
            .append_step(
                TrajectoryStep::new(0, StepKind::ToolCall, "q", Some("search".into()), 1).unwrap(),
            )
            .unwrap();
        trajectory
            .append_step(
                TrajectoryStep::new(1, StepKind::ToolResponse, "r", Some("search".into()), 1)
                    .unwrap(),
            )
            .unwrap();
        assert!(!has_final_answer(&trajectory));
        trajectory
            .append_step(TrajectoryStep::new(2, StepKind::Answer, "done", None, 1).unwrap())
            .unwrap();
        assert!(has_final_answer(&trajectory));
    }

    #[test]
    fn prompt_base_is_system_plus_brief() {
        let brief = minimal_brief("task");
        let request = build_prompt(
            &brief,
            &Trajectory::new(0),
            &static_ctx(),
            &SamplingParams::default(),
        );
        assert_eq!(request.messages.len(), 2);
        assert!(request.messages[1].content.contains("1) Task: task"));
    }

    #[test]
    fn prompt_lists_next_actions_exactly() {
        let mut brief = minimal_brief("task");
        brief.next_actions = vec!["a".into(), "b".into(), "c".into()];
        let request = build_prompt(
            &brief,
            &Trajectory::new(0),
            &static_ctx(),
            &SamplingParams::default(),
        );
        let rendered = &request.messages[1].content;
        let block = rendered.split("5) Next Actions (Plan):").nth(1).unwrap();
        let bullets = block
            .lines()
            .skip(1)
            .take_while(|l| l.starts_with("- "))
            .count();
        assert_eq!(bullets, 3);
    }

    #[test]
    fn prompt_grows_one_message_per_step() {
        let brief = minimal_brief("task");
        let mut trajectory = Trajectory::new(0);
        let base = build_prompt(
            &brief,
            &trajectory,
            &static_ctx(),
            &SamplingParams::default(),
        )
        .messages
        .len();
        trajectory
            .append_step(
                TrajectoryStep::new(0, StepKind::ToolCall, "q", Some("search".into()), 1).unwrap(),
            )
            .unwrap();
        trajectory
            .append_step(
                TrajectoryStep::new(1, StepKind::ToolResponse, "r", Some("search".into()), 1)
                    .unwrap(),
            )
            .unwrap();
        let grown = build_prompt(
            &brief,
            &trajectory,
            &static_ctx(),
            &SamplingParams::default(),
        )
        .messages
        .len();
        assert_eq!(grown, base + 2);
    }

    fn env<'a>(
        gateway: &'a Gateway,
        registry: &'a ToolRegistry,
        static_ctx: &'a StaticContext,
        i_max: usize,
    ) -> TurnEnv<'a> {
        TurnEnv {
            gateway,
            registry,
            static_ctx,
            sampling: SamplingParams::default(),
            i_max,
            tool_retry_cap: 1,
        }
    }

    #[test]
    fn turn_ends_on_final_answer() {
        let fixture = ScriptedFixture::default()
            .with_entry(
                "main:0",
                "<think>look</think><tool_call name=\"search\">who</tool_call>",
            )
            .with_entry("main:1", "<answer>42</answer>");
        let gateway = Gateway::scripted(fixture);
        let registry = mock_registry(MockCorpus::default());
        let ctx = static_ctx();
        let mut monitor = MonitorHandle::new(TriggerConfig::default(), true);
        let trajectory = execute_turn(
            &env(&gateway, &registry, &ctx, 8),
            0,
            &minimal_brief("t"),
            &mut monitor,
        )
        .unwrap();
        assert!(trajectory.has_final_answer());
        assert_eq!(trajectory.model_step_count(), 3); // thought + call + answer
        assert_eq!(gateway.call_log().len(), 2, "two model steps issued");
    }

    #[test]
    fn trigger_stops_loop_before_next_model_step() {
        // identical calls trip the looping rule at the third observation
        let fixture = ScriptedFixture::default()
            .with_entry("main:*", "<tool_call name=\"search\">same</tool_call>");
        let gateway = Gateway::scripted(fixture);
        let registry = mock_registry(MockCorpus::default());
        let ctx = static_ctx();
        let mut monitor = MonitorHandle::new(TriggerConfig::default(), true);
        let trajectory = execute_turn(
            &env(&gateway, &registry, &ctx, 10),
            0,
            &minimal_brief("t"),
            &mut monitor,
        )
        .unwrap();
        assert_eq!(
            gateway.call_log().len(),
            3,
            "no gateway call after the trigger"
        );
        assert!(!trajectory.has_final_answer());
        assert!(monitor.snapshot().triggered);
    }

    #[test]
    fn i_max_zero_yields_empty_trajectory() {
        let gateway = Gateway::scripted(ScriptedFixture::default());
        let registry = mock_registry(MockCorpus::default());
        let ctx = static_ctx();
        let mut monitor = MonitorHandle::new(TriggerConfig::default(), true);
        let trajectory = execute_turn(
            &env(&gateway, &registry, &ctx, 0),
            0,
            &minimal_brief("t"),
            &mut monitor,
        )
        .unwrap();
        assert!(trajectory.is_empty());
        assert!(gateway.call_log().is_empty());
    }

    #[test]
    fn bare_text_consumes_an_iteration_as_thought() {
        let fixture = ScriptedFixture::default().with_entry("main:*", "just musing");
        let gateway = Gateway::scripted(fixture);
        let registry = mock_registry(MockCorpus::default());
        let ctx = static_ctx();
        let mut monitor = MonitorHandle::new(TriggerConfig::default(), true);
        let trajectory = execute_turn(
            &env(&gateway, &registry, &ctx, 4),
            0,
            &minimal_brief("t"),
            &mut monitor,
        )
        .unwrap();
        // four bare-text iterations, all thoughts, no runaway
        assert_eq!(trajectory.len(), 4);
        assert!(trajectory.steps.iter().all(|s| s.kind == StepKind::Thought));
    }

    #[test]
    fn unknown_tool_becomes_observation_not_error() {
        let fixture = ScriptedFixture::default()
            .with_entry("main:0", "<tool_call name=\"frobnicate\">x</tool_call>")
            .with_entry("main:1", "<answer>done</answer>");
        let gateway = Gateway::scripted(fixture);
        let registry = mock_registry(MockCorpus::default());
        let ctx = static_ctx();
        let mut monitor = MonitorHandle::new(TriggerConfig::default(), true);
        let trajectory = execute_turn(
            &env(&gateway, &registry, &ctx, 4),
            0,
            &minimal_brief("t"),
            &mut monitor,
        )
        .unwrap();
        let observation = trajectory
            .steps
            .iter()
            .find(|s| s.kind == StepKind::ToolResponse)
            .expect("observation recorded");
        assert!(observation.content.starts_with(TOOL_ERROR_PREFIX));
        assert!(trajectory.has_final_answer());
    }
}
