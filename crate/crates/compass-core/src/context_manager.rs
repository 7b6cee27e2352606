//! Context synthesis: builds the per-turn six-section brief, parses and
//! renders the brief format, appends note records, and produces the final
//! answer.

use regex::Regex;
use thiserror::Error;

use crate::gateway::{count_tokens, ChatMessage, ChatRequest, Component, Gateway, GatewayError};
use crate::meta_thinker::strip_bullet;
use crate::model::{
    ContextBrief, MetaDecision, MetaVerdict, ModelError, NoteRecord, NoteStore, Query,
    SamplingParams, Trajectory,
};

/// How many of the newest note records enter the synthesis prompt
/// verbatim; older ones are summarized as a count.
const NOTES_RENDER_WINDOW: usize = 8;

/// Phrases treated as hedging in synthesized answers.
const HEDGING_PHRASES: [&str; 3] = [
    "insufficient information",
    "cannot determine",
    "not enough information",
];

/// Brief-synthesis knobs: the token budget and the cap on next actions.
#[derive(Debug, Clone, Copy)]
pub struct BriefConfig {
    pub token_budget: u64,
    pub next_actions_cap: usize,
}

impl Default for BriefConfig {
    fn default() -> Self {
        Self {
            token_budget: 300,
            next_actions_cap: 4,
        }
    }
}

// ---------------------------------------------------------------------------
// Rendering and parsing the six-section format
// ---------------------------------------------------------------------------

/// Canonical rendering of a brief. The empty Tool Hints section is
/// omitted; every other section header is always present.
pub fn render_brief(brief: &ContextBrief) -> String {
    let mut out = String::new();
    out.push_str(&format!("1) Task: {}\n", brief.task));
    out.push_str("2) Most-Recent Evidence:\n");
    for item in &brief.evidence {
        out.push_str(&format!("- {item}\n"));
    }
    out.push_str("3) Critical Constraints & Corrections:\n");
    for item in &brief.constraints {
        out.push_str(&format!("- {item}\n"));
    }
    out.push_str("4) Open Items:\n");
    for item in &brief.open_items {
        out.push_str(&format!("- {item}\n"));
    }
    out.push_str("5) Next Actions (Plan):\n");
    for item in &brief.next_actions {
        out.push_str(&format!("- {item}\n"));
    }
    if !brief.tool_hints.is_empty() {
        out.push_str("6) Tool Hints (Optional):\n");
        for item in &brief.tool_hints {
            out.push_str(&format!("- {item}\n"));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Task,
    Evidence,
    Constraints,
    OpenItems,
    NextActions,
    ToolHints,
}

fn header_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)^\s*(?:\d+\s*[).:]?\s*)?(task|most-recent evidence|critical constraints & corrections|open items|next actions|tool hints)\b[^:]*:?\s*(.*)$",
        )
        .expect("header regex compiles")
    })
}

fn bullet_line(line: &str) -> Option<String> {
    let trimmed = line.trim();
    if trimmed.is_empty() {
        return None;
    }
    let starts_bulleted = trimmed.starts_with("- ")
        || trimmed.starts_with("* ")
        || trimmed.starts_with("• ")
        || trimmed
            .find(|c: char| !c.is_ascii_digit())
            .is_some_and(|i| i > 0 && matches!(trimmed.as_bytes()[i], b'.' | b')'));
    starts_bulleted
        .then(|| strip_bullet(trimmed).to_string())
        .filter(|s| !s.is_empty())
}

/// Parses the six-section brief format. Section numbering is optional;
/// sections 1 (Task) and 5 (Next Actions) are required, 6 (Tool Hints) is
/// optional, and the remaining sections default to empty lists. The parsed
/// `turn_id` is 0; callers stamp the real turn.
pub fn parse_brief(text: &str) -> Result<ContextBrief, BriefParseError> {
    let header_re = header_regex();
    let mut task: Option<String> = None;
    let mut evidence = Vec::new();
    let mut constraints = Vec::new();
    let mut open_items = Vec::new();
    let mut next_actions = Vec::new();
    let mut tool_hints = Vec::new();
    let mut saw_next_actions = false;
    let mut current: Option<Section> = None;

    for line in text.lines() {
        if let Some(caps) = header_re.captures(line) {
            let name = caps
                .get(1)
                .expect("header name")
                .as_str()
                .to_ascii_lowercase();
            let rest = caps.get(2).map_or("", |m| m.as_str()).trim();
            let section = match name.as_str() {
                "task" => Section::Task,
                "most-recent evidence" => Section::Evidence,
                "critical constraints & corrections" => Section::Constraints,
                "open items" => Section::OpenItems,
                "next actions" => Section::NextActions,
                "tool hints" => Section::ToolHints,
                _ => unreachable!("alternation is exhaustive"),
            };
            if section == Section::Task && !rest.is_empty() {
                task.get_or_insert_with(|| rest.to_string());
            }
            if section == Section::NextActions {
                saw_next_actions = true;
            }
            current = Some(section);
            continue;
        }
        match current {
            Some(Section::Task) => {
                if task.is_none() {
                    let value = strip_bullet(line);
                    if !value.is_empty() {
                        task = Some(value.to_string());
                    }
                }
            }
            Some(section) => {
                if let Some(item) = bullet_line(line) {
                    match section {
                        Section::Evidence => evidence.push(item),
                        Section::Constraints => constraints.push(item),
                        Section::OpenItems => open_items.push(item),
                        Section::NextActions => next_actions.push(item),
                        Section::ToolHints => tool_hints.push(item),
                        Section::Task => unreachable!(),
                    }
                }
            }
            None => {}
        }
    }

    let task = task.ok_or(BriefParseError::MissingTask)?;
    if !saw_next_actions {
        return Err(BriefParseError::MissingNextActions);
    }
    Ok(ContextBrief {
        turn_id: 0,
        task,
        evidence,
        constraints,
        open_items,
        next_actions,
        tool_hints,
        token_count: count_tokens(text),
    })
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BriefParseError {
    #[error("brief has no Task section")]
    MissingTask,
    #[error("brief has no Next Actions section")]
    MissingNextActions,
}

// ---------------------------------------------------------------------------
// Notes
// ---------------------------------------------------------------------------

/// Renders the note store for prompts: the newest records verbatim, older
/// ones collapsed into a count so the prompt stays bounded across turns.
pub fn render_notes(notes: &NoteStore) -> String {
    if notes.is_empty() {
        return "(no notes yet)".to_string();
    }
    let mut out = String::new();
    let skip = notes.records.len().saturating_sub(NOTES_RENDER_WINDOW);
    if skip > 0 {
        out.push_str(&format!("({skip} older rounds omitted)\n"));
    }
    for record in &notes.records[skip..] {
        out.push_str(&format!("Round {}:\n", record.round));
        for (label, items) in [
            ("evidence", &record.evidence),
            ("constraints", &record.constraints),
            ("open items", &record.open_items),
        ] {
            if !items.is_empty() {
                out.push_str(&format!("  {label}:\n"));
                for item in items {
                    out.push_str(&format!("  - {item}\n"));
                }
            }
        }
    }
    out
}

/// Appends one record copied from the brief's evidence, constraints, and
/// open-items sections; the sole mutation point of the store after
/// initialization.
pub fn update_notes(
    notes: &mut NoteStore,
    brief: &ContextBrief,
    turn_id: usize,
) -> Result<(), ModelError> {
    notes.append(NoteRecord {
        round: turn_id as i64,
        evidence: brief.evidence.clone(),
        constraints: brief.constraints.clone(),
        open_items: brief.open_items.clone(),
    })
}

// ---------------------------------------------------------------------------
// Synthesis
// ---------------------------------------------------------------------------

fn synthesis_system(budget: u64) -> String {
    format!(
        "You compress task history into an execution-ready context brief for a research agent. \
Reply with exactly these numbered sections:\n\
1) Task: one sentence restating the task.\n\
2) Most-Recent Evidence: 2-5 bullets of verified facts, naming the source tool where it matters.\n\
3) Critical Constraints & Corrections: bullets for formatting or grounding constraints and for corrections of earlier mistakes.\n\
4) Open Items: bullets for unresolved sub-questions, highest priority first.\n\
5) Next Actions (Plan): 2-4 bullets of concrete steps consistent with the supervisor verdict.\n\
6) Tool Hints (Optional): bullets naming specific tools, or omit this section.\n\
Promote only what the next turn needs; never copy raw history. Keep the whole brief under {budget} tokens."
    )
}

fn synthesis_user(
    query: &Query,
    notes: &NoteStore,
    last_trajectory: Option<&Trajectory>,
    decision: Option<&MetaDecision>,
) -> String {
    let trajectory = match last_trajectory {
        Some(t) => t.render_compact(),
        None => "(no turns executed yet)".to_string(),
    };
    let verdict = match decision {
        Some(d) => format!("{} — {}", d.verdict.as_str(), d.rationale),
        None => "none yet".to_string(),
    };
    format!(
        "Task: {}\n\nNotes:\n{}\nLatest turn:\n{}\nSupervisor verdict: {}",
        query.text,
        render_notes(notes),
        trajectory,
        verdict
    )
}

/// One synthesis completion, with at most one re-ask when the output fails
/// to parse or exceeds the budget; any remaining overrun is resolved by
/// tail-first truncation that never touches the task or the constraints.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_context(
    query: &Query,
    notes: &NoteStore,
    last_trajectory: Option<&Trajectory>,
    decision: Option<&MetaDecision>,
    gateway: &Gateway,
    sampling: &SamplingParams,
    config: &BriefConfig,
    turn_id: usize,
) -> Result<ContextBrief, ContextError> {
    if decision.is_some_and(|d| d.verdict == MetaVerdict::Stop) {
        return Err(ContextError::StopDecision);
    }
    let system = synthesis_system(config.token_budget);
    let user = synthesis_user(query, notes, last_trajectory, decision);
    let request = ChatRequest::new(vec![
        ChatMessage::system(system.clone()),
        ChatMessage::user(user.clone()),
    ])
    .with_sampling(sampling);
    let first = gateway.complete(Component::Context, &request)?;
    let parsed = parse_brief(&first.text);

    let needs_reask = match &parsed {
        Err(_) => true,
        Ok(brief) => brief.token_count > config.token_budget,
    };
    let mut brief = if needs_reask {
        let nudge = match &parsed {
            Err(_) => {
                "Your previous reply did not follow the section format. Reply again \
using exactly the six numbered sections; sections 1 and 5 are required."
            }
            Ok(_) => {
                "Your previous reply was too long. Shorten the brief to fit the token \
budget, keeping sections 1 and 3 intact."
            }
        };
        let retry = ChatRequest::new(vec![
            ChatMessage::system(system),
            ChatMessage::user(format!("{user}\n\n{nudge}")),
        ])
        .with_sampling(sampling);
        let second = gateway.complete(Component::Context, &retry)?;
        match (parse_brief(&second.text), parsed) {
            (Ok(b), _) => b,
            (Err(_), Ok(b)) => b,
            (Err(e), Err(_)) => return Err(ContextError::BriefParse(e)),
        }
    } else {
        parsed.expect("checked above")
    };

    brief.turn_id = turn_id;
    brief.next_actions.truncate(config.next_actions_cap);
    enforce_budget(&mut brief, config.token_budget);
    Ok(brief)
}

/// Drops bullets tail-first (evidence, then open items, then tool hints,
/// then next actions) until the rendered brief fits the budget. The task
/// and the constraints are never removed; if they alone exceed the budget
/// the brief is returned at that floor.
pub fn enforce_budget(brief: &mut ContextBrief, budget: u64) {
    brief.token_count = count_tokens(&render_brief(brief));
    while brief.token_count > budget {
        let dropped = brief.evidence.pop().is_some()
            || brief.open_items.pop().is_some()
            || brief.tool_hints.pop().is_some()
            || brief.next_actions.pop().is_some();
        if !dropped {
            break;
        }
        brief.token_count = count_tokens(&render_brief(brief));
    }
}

// ---------------------------------------------------------------------------
// Final answer
// ---------------------------------------------------------------------------

const SYNTHESIZER_SYSTEM: &str = "You write the final user-facing answer for a completed \
research run. Integrate the final trace with the notes, prefer verified findings, resolve \
minor inconsistencies toward the best-supported reading, and answer the task directly in \
concise, confident language with a one-line justification when sources matter. Avoid \
hedging such as \"insufficient information\"; give your strongest synthesis.";

fn is_hedging(text: &str) -> bool {
    let lower = text.to_lowercase();
    HEDGING_PHRASES.iter().any(|phrase| lower.contains(phrase))
}

/// One synthesizer completion over the query, the final trace, and the
/// notes; hedging or empty output is re-asked once. The fallback chain
/// (last answer step, then newest evidence bullet, then the query text)
/// keeps the result non-empty.
pub fn extract_answer(
    last_trajectory: &Trajectory,
    notes: &NoteStore,
    query: &Query,
    gateway: &Gateway,
    sampling: &SamplingParams,
) -> Result<String, GatewayError> {
    let user = format!(
        "Task: {}\n\nFinal trace:\n{}\nNotes:\n{}",
        query.text,
        last_trajectory.render_compact(),
        render_notes(notes)
    );
    let request = ChatRequest::new(vec![
        ChatMessage::system(SYNTHESIZER_SYSTEM),
        ChatMessage::user(user.clone()),
    ])
    .with_sampling(sampling);
    let first = gateway.complete(Component::Synthesizer, &request)?;
    let answer = first.text.trim().to_string();
    if !answer.is_empty() && !is_hedging(&answer) {
        return Ok(answer);
    }

    let retry = ChatRequest::new(vec![
        ChatMessage::system(SYNTHESIZER_SYSTEM),
        ChatMessage::user(format!(
            "{user}\n\nYour previous reply was empty or hedged. State the single best answer directly."
        )),
    ])
    .with_sampling(sampling);
    let second = gateway.complete(Component::Synthesizer, &retry)?;
    let answer = second.text.trim().to_string();
    if !answer.is_empty() {
        return Ok(answer);
    }

    if let Some(step_answer) = last_trajectory
        .final_answer()
        .filter(|a| !a.trim().is_empty())
    {
        return Ok(step_answer.trim().to_string());
    }
    if let Some(bullet) = notes.last_evidence_bullet() {
        return Ok(bullet.to_string());
    }
    Ok(query.text.clone())
}

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("synthesize_context called with a STOP decision")]
    StopDecision,
    #[error(transparent)]
    BriefParse(#[from] BriefParseError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    /// A minimal valid brief whose token count matches its rendering.
    pub fn minimal_brief(task: &str) -> ContextBrief {
        let mut brief = ContextBrief {
            turn_id: 0,
            task: task.to_string(),
            evidence: vec![],
            constraints: vec![],
            open_items: vec![],
            next_actions: vec!["start".to_string()],
            tool_hints: vec![],
            token_count: 0,
        };
        brief.token_count = count_tokens(&render_brief(&brief));
        brief
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptedFixture;
    use crate::model::{StepKind, TrajectoryStep};

    const FULL_BRIEF: &str = "1) Task: Identify the 1990 match.\n\
2) Most-Recent Evidence:\n- referee confirmed Brazilian (search)\n- match had four yellow cards\n- three cards came after half-time\n\
3) Critical Constraints & Corrections:\n- referee must be Brazilian\n- window is 1990-1994 inclusive\n\
4) Open Items:\n- confirm the injury substitution minute\n\
5) Next Actions (Plan):\n- browse the archived match report\n- verify the substitution reason\n\
6) Tool Hints (Optional):\n- search\n- browse\n";

    #[test]
    fn parses_full_six_section_fixture() {
        let brief = parse_brief(FULL_BRIEF).unwrap();
        assert_eq!(brief.task, "Identify the 1990 match.");
        assert_eq!(brief.evidence.len(), 3);
        assert_eq!(brief.constraints.len(), 2);
        assert_eq!(brief.open_items.len(), 1);
        assert_eq!(brief.next_actions.len(), 2);
        assert_eq!(brief.tool_hints.len(), 2);
    }

    #[test]
    fn parses_without_numbering_or_tool_hints() {
        let text = "Task: Find the answer.\nMost-Recent Evidence:\n- a fact\n\
Critical Constraints & Corrections:\nOpen Items:\nNext Actions (Plan):\n- do the thing\n";
        let brief = parse_brief(text).unwrap();
        assert_eq!(brief.task, "Find the answer.");
        assert!(brief.tool_hints.is_empty());
        assert_eq!(brief.next_actions, vec!["do the thing".to_string()]);
    }

    #[test]
    fn parse_errors() {
        assert_eq!(parse_brief(""), Err(BriefParseError::MissingTask));
        assert_eq!(
            parse_brief("2) Most-Recent Evidence:\n- x\n5) Next Actions (Plan):\n- y\n"),
            Err(BriefParseError::MissingTask)
        );
        assert_eq!(
            parse_brief("1) Task: something\n2) Most-Recent Evidence:\n- x\n"),
            Err(BriefParseError::MissingNextActions)
        );
    }

    #[test]
    fn render_parse_round_trip() {
        let brief = parse_brief(FULL_BRIEF).unwrap();
        let rendered = render_brief(&brief);
        let reparsed = parse_brief(&rendered).unwrap();
        let canonical = ContextBrief {
            token_count: count_tokens(&rendered),
            ..brief
        };
        assert_eq!(reparsed, canonical);
    }

    #[test]
    fn notes_render_window_collapses_older_rounds() {
        let mut notes = NoteStore::new();
        for round in -1..9 {
            notes
                .append(NoteRecord {
                    round,
                    evidence: vec![format!("fact from round {round}")],
                    constraints: vec![],
                    open_items: vec![],
                })
                .unwrap();
        }
        let rendered = render_notes(&notes);
        assert!(rendered.starts_with("(2 older rounds omitted)"));
        assert!(!rendered.contains("fact from round -1"));
        assert!(!rendered.contains("fact from round 0\n"));
        for round in 1..9 {
            assert!(rendered.contains(&format!("fact from round {round}")));
        }
        assert_eq!(render_notes(&NoteStore::new()), "(no notes yet)");
    }

    #[test]
    fn update_notes_appends_exactly_one_record() {
        let mut notes = NoteStore::new();
        notes
            .append(NoteRecord {
                round: -1,
                evidence: vec![],
                constraints: vec![],
                open_items: vec!["plan".into()],
            })
            .unwrap();
        let mut brief = tests_support::minimal_brief("t");
        brief.evidence = vec!["e1".into(), "e2".into(), "e3".into()];
        update_notes(&mut notes, &brief, 0).unwrap();
        assert_eq!(notes.len(), 2);
        assert_eq!(notes.records[1].round, 0);
        assert_eq!(notes.records[1].evidence.len(), 3);

        // empty sections still append unconditionally
        let empty = tests_support::minimal_brief("t");
        update_notes(&mut notes, &empty, 1).unwrap();
        assert_eq!(notes.len(), 3);
        let rounds: Vec<i64> = notes.records.iter().map(|r| r.round).collect();
        assert_eq!(rounds, vec![-1, 0, 1]);
    }

    fn query() -> Query {
        Query::new("q1", "Identify the 1990 match.").unwrap()
    }

    fn seeded_notes() -> NoteStore {
        let mut notes = NoteStore::new();
        notes
            .append(NoteRecord {
                round: -1,
                evidence: vec![],
                constraints: vec![],
                open_items: vec!["search for the referee".into()],
            })
            .unwrap();
        notes
    }

    #[test]
    fn synthesize_turn_zero_uses_single_call() {
        let gw = Gateway::scripted(ScriptedFixture::default().with_entry("context:0", FULL_BRIEF));
        let brief = synthesize_context(
            &query(),
            &seeded_notes(),
            None,
            None,
            &gw,
            &SamplingParams::default(),
            &BriefConfig::default(),
            0,
        )
        .unwrap();
        assert_eq!(brief.turn_id, 0);
        assert_eq!(brief.task, "Identify the 1990 match.");
        assert_eq!(gw.call_log().len(), 1);
    }

    #[test]
    fn synthesize_reasks_once_when_over_budget() {
        let long_brief = format!(
            "1) Task: t\n2) Most-Recent Evidence:\n- {}\n3) Critical Constraints & Corrections:\n4) Open Items:\n5) Next Actions (Plan):\n- go\n",
            "x".repeat(4000)
        );
        let fixture = ScriptedFixture::default()
            .with_entry("context:0", long_brief)
            .with_entry("context:1", FULL_BRIEF);
        let gw = Gateway::scripted(fixture);
        let brief = synthesize_context(
            &query(),
            &seeded_notes(),
            None,
            None,
            &gw,
            &SamplingParams::default(),
            &BriefConfig::default(),
            0,
        )
        .unwrap();
        assert!(brief.token_count <= 300);
        assert_eq!(gw.call_log().len(), 2, "exactly one re-ask recorded");
    }

    #[test]
    fn synthesize_truncates_when_reask_still_over_budget() {
        let over = |n: usize| {
            let bullets: String = (0..n).map(|i| format!("- evidence item {i}\n")).collect();
            format!(
                "1) Task: t\n2) Most-Recent Evidence:\n{bullets}3) Critical Constraints & Corrections:\n- keep me\n4) Open Items:\n5) Next Actions (Plan):\n- go\n"
            )
        };
        let fixture = ScriptedFixture::default()
            .with_entry("context:0", over(120))
            .with_entry("context:1", over(110));
        let gw = Gateway::scripted(fixture);
        let brief = synthesize_context(
            &query(),
            &seeded_notes(),
            None,
            None,
            &gw,
            &SamplingParams::default(),
            &BriefConfig::default(),
            0,
        )
        .unwrap();
        assert!(brief.token_count <= 300);
        assert_eq!(brief.task, "t");
        assert_eq!(brief.constraints, vec!["keep me".to_string()]);
    }

    #[test]
    fn synthesize_rejects_stop_decision() {
        let gw = Gateway::scripted(ScriptedFixture::default());
        let stop = MetaDecision {
            verdict: MetaVerdict::Stop,
            rationale: "done".into(),
            raised_by_trigger: false,
        };
        let err = synthesize_context(
            &query(),
            &seeded_notes(),
            None,
            Some(&stop),
            &gw,
            &SamplingParams::default(),
            &BriefConfig::default(),
            1,
        )
        .unwrap_err();
        assert!(matches!(err, ContextError::StopDecision));
    }

    #[test]
    fn synthesize_carries_decision_text_into_prompt() {
        // scripted reply echoes the rationale into constraints, as a real
        // manager would; the test pins the plumbing end to end
        let echoed = "1) Task: t\n2) Most-Recent Evidence:\n3) Critical Constraints & Corrections:\n- source exhausted\n4) Open Items:\n5) Next Actions (Plan):\n- pick a new source\n";
        let gw = Gateway::scripted(ScriptedFixture::default().with_entry("context:0", echoed));
        let decision = MetaDecision {
            verdict: MetaVerdict::Replan,
            rationale: "source exhausted".into(),
            raised_by_trigger: true,
        };
        let brief = synthesize_context(
            &query(),
            &seeded_notes(),
            None,
            Some(&decision),
            &gw,
            &SamplingParams::default(),
            &BriefConfig::default(),
            2,
        )
        .unwrap();
        assert!(brief
            .constraints
            .iter()
            .chain(&brief.next_actions)
            .any(|s| s.contains("source")));
        assert_eq!(brief.turn_id, 2);
    }

    #[test]
    fn brief_parse_error_after_one_reask() {
        let fixture = ScriptedFixture::default()
            .with_entry("context:0", "no sections here")
            .with_entry("context:1", "still no sections");
        let gw = Gateway::scripted(fixture);
        let err = synthesize_context(
            &query(),
            &seeded_notes(),
            None,
            None,
            &gw,
            &SamplingParams::default(),
            &BriefConfig::default(),
            0,
        )
        .unwrap_err();
        assert!(matches!(err, ContextError::BriefParse(_)));
        assert_eq!(gw.call_log().len(), 2);
    }

    fn answered_trajectory(answer: &str) -> Trajectory {
        let mut t = Trajectory::new(0);
        t.append_step(TrajectoryStep::new(0, StepKind::Answer, answer, None, 1).unwrap())
            .unwrap();
        t
    }

    #[test]
    fn extract_answer_echoes_synthesizer() {
        let gw = Gateway::scripted(
            ScriptedFixture::default().with_entry("synthesizer:0", "Ireland v Romania"),
        );
        let answer = extract_answer(
            &answered_trajectory("Ireland v Romania"),
            &seeded_notes(),
            &query(),
            &gw,
            &SamplingParams::default(),
        )
        .unwrap();
        assert_eq!(answer, "Ireland v Romania");
    }

    #[test]
    fn extract_answer_reasks_on_hedging() {
        let fixture = ScriptedFixture::default()
            .with_entry(
                "synthesizer:0",
                "There is insufficient information to decide.",
            )
            .with_entry("synthesizer:1", "Ireland v Romania");
        let gw = Gateway::scripted(fixture);
        let answer = extract_answer(
            &Trajectory::new(0),
            &seeded_notes(),
            &query(),
            &gw,
            &SamplingParams::default(),
        )
        .unwrap();
        assert_eq!(answer, "Ireland v Romania");
        assert_eq!(gw.call_log().len(), 2, "one re-ask recorded");
    }

    #[test]
    fn extract_answer_fallback_chain() {
        // both synthesizer replies empty → answer step wins
        let empty_twice = || {
            Gateway::scripted(
                ScriptedFixture::default()
                    .with_entry("synthesizer:0", "")
                    .with_entry("synthesizer:1", ""),
            )
        };
        let answer = extract_answer(
            &answered_trajectory("from the step"),
            &seeded_notes(),
            &query(),
            &empty_twice(),
            &SamplingParams::default(),
        )
        .unwrap();
        assert_eq!(answer, "from the step");

        // no answer step → newest evidence bullet
        let mut notes = seeded_notes();
        notes
            .append(NoteRecord {
                round: 0,
                evidence: vec!["older".into(), "best evidence".into()],
                constraints: vec![],
                open_items: vec![],
            })
            .unwrap();
        let answer = extract_answer(
            &Trajectory::new(0),
            &notes,
            &query(),
            &empty_twice(),
            &SamplingParams::default(),
        )
        .unwrap();
        assert_eq!(answer, "best evidence");

        // nothing anywhere → query text, never empty
        let answer = extract_answer(
            &Trajectory::new(0),
            &seeded_notes(),
            &query(),
            &empty_twice(),
            &SamplingParams::default(),
        )
        .unwrap();
        assert!(!answer.is_empty());
    }
}
