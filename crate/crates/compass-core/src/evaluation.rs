//! Answer grading, strategic-decision judging, and report aggregation:
//! Pass@1 plus the four decision rates (PAR, PVR, CA, ERC) and their mean,
//! with token accounting.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatMessage, ChatRequest, Component, Gateway, GatewayError};
use crate::model::{MetaDecision, MetaVerdict, RunResult, StepKind};

pub use crate::model::TokenReport;

/// Relative tolerance for numeric answer comparison (absolute near zero).
const NUMERIC_REL_TOL: f64 = 1e-4;
const NUMERIC_ABS_TOL: f64 = 1e-9;

/// A graded answer. `correct` implies an extracted answer is present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub extracted_final_answer: Option<String>,
    pub reasoning: String,
    pub correct: bool,
}

impl Verdict {
    fn incorrect(reasoning: impl Into<String>, extracted: Option<String>) -> Self {
        Self {
            extracted_final_answer: extracted,
            reasoning: reasoning.into(),
            correct: false,
        }
    }
}

/// The four judged decision metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MetricKind {
    Par,
    Pvr,
    Ca,
    Erc,
}

impl MetricKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::Par => "PAR",
            MetricKind::Pvr => "PVR",
            MetricKind::Ca => "CA",
            MetricKind::Erc => "ERC",
        }
    }

    fn answer_field(&self) -> &'static str {
        match self {
            MetricKind::Par => "par_correct",
            MetricKind::Pvr => "pvr_correct",
            MetricKind::Ca => "ca_correct",
            MetricKind::Erc => "erc_correct",
        }
    }

    fn needs_gold(&self) -> bool {
        matches!(self, MetricKind::Ca | MetricKind::Erc)
    }
}

/// One judged decision, tied back to its run/turn locator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionJudgment {
    pub metric: MetricKind,
    pub correct: bool,
    pub reasoning: String,
    pub trajectory_ref: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub correct: u64,
    pub total: u64,
}

impl MetricCounts {
    fn rate(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

/// Aggregated rates. A rate with an empty denominator is reported as
/// absent, and the adequacy mean is present only when all four rates are.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pass_at_1: Option<f64>,
    pub par: Option<f64>,
    pub pvr: Option<f64>,
    pub ca: Option<f64>,
    pub erc: Option<f64>,
    pub strategy_adequacy: Option<f64>,
    pub counts: ReportCounts,
    pub tokens: TokenReport,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub pass: MetricCounts,
    pub par: MetricCounts,
    pub pvr: MetricCounts,
    pub ca: MetricCounts,
    pub erc: MetricCounts,
}

// ---------------------------------------------------------------------------
// Answer grading
// ---------------------------------------------------------------------------

/// Response format the graded systems are asked to follow.
pub fn format_query(question: &str) -> String {
    format!(
        "{question}\n\nYour response should be in the following format:\n\
Explanation: {{your explanation for your final answer}}\n\
Exact Answer: {{your succinct, final answer}}"
    )
}

fn grader_prompt(question: &str, response: &str, gold: &str) -> String {
    format!(
        "Judge whether the [response] to the [question] is correct, using the precise and \
unambiguous [correct_answer] as the only ground truth.\n\n\
[question]: {question}\n[response]: {response}\n[correct_answer]: {gold}\n\n\
Reply in exactly this format:\n\
extracted_final_answer: the exact final answer taken from [response], or None if it has none\n\
reasoning: why the extracted_final_answer is or is not correct, judged only against [correct_answer]\n\
correct: yes or no (allow a small tolerance on numeric answers)"
    )
}

/// Pulls the text after the last `Exact Answer:` marker, normalizing a
/// literal `None` away.
fn extract_exact_answer(response: &str) -> Option<String> {
    static RE: std::sync::OnceLock<regex::Regex> = std::sync::OnceLock::new();
    let re = RE.get_or_init(|| {
        regex::Regex::new(r"(?i)exact answer:").expect("marker regex compiles")
    });
    let at = re.find_iter(response).last()?;
    let rest = response[at.end()..].lines().next().unwrap_or("").trim();
    if rest.is_empty() || rest.eq_ignore_ascii_case("none") {
        return None;
    }
    Some(rest.to_string())
}

/// String-or-number comparison: exact after trimming, else numeric within
/// relative 1e-4 (absolute 1e-9 near zero).
pub fn answers_match(candidate: &str, gold: &str) -> bool {
    let candidate = candidate.trim();
    let gold = gold.trim();
    if candidate == gold {
        return true;
    }
    match (candidate.parse::<f64>(), gold.parse::<f64>()) {
        (Ok(a), Ok(b)) => {
            let tol = NUMERIC_ABS_TOL.max(NUMERIC_REL_TOL * b.abs());
            (a - b).abs() <= tol
        }
        _ => false,
    }
}

/// Grades one response against gold. Deterministic paths first: a
/// response equal to gold, or an extracted exact answer that matches,
/// short-circuits without a judge call; a response with no extractable
/// answer is incorrect. Only genuinely differing answers reach the judge.
pub fn grade_answer(
    question: &str,
    response: &str,
    gold: &str,
    judge: &Gateway,
) -> Result<Verdict, EvalError> {
    if gold.trim().is_empty() {
        return Err(EvalError::EmptyGold);
    }
    if answers_match(response, gold) {
        return Ok(Verdict {
            extracted_final_answer: Some(response.trim().to_string()),
            reasoning: "response equals the gold answer".to_string(),
            correct: true,
        });
    }
    let Some(extracted) = extract_exact_answer(response) else {
        return Ok(Verdict::incorrect(
            "no exact final answer in the response",
            None,
        ));
    };
    if answers_match(&extracted, gold) {
        return Ok(Verdict {
            extracted_final_answer: Some(extracted),
            reasoning: "extracted answer matches the gold answer".to_string(),
            correct: true,
        });
    }

    let request = ChatRequest::new(vec![ChatMessage::user(grader_prompt(
        question, response, gold,
    ))]);
    let reply = judge.complete(Component::Judge, &request)?;
    match parse_grader_reply(&reply.text) {
        Some((judged_extraction, reasoning, correct)) => {
            let extracted_final_answer = judged_extraction.or(Some(extracted));
            Ok(Verdict {
                correct: correct && extracted_final_answer.is_some(),
                extracted_final_answer,
                reasoning,
            })
        }
        None => Ok(Verdict::incorrect(reply.text, None)),
    }
}

fn field_line<'a>(text: &'a str, field: &str) -> Option<&'a str> {
    let prefix = format!("{field}:");
    text.lines().find_map(|line| {
        let trimmed = line.trim().trim_start_matches(['*', '-', ' ']);
        (trimmed.len() >= prefix.len()
            && trimmed.is_char_boundary(prefix.len())
            && trimmed[..prefix.len()].eq_ignore_ascii_case(&prefix))
        .then(|| trimmed[prefix.len()..].trim())
    })
}

fn parse_grader_reply(text: &str) -> Option<(Option<String>, String, bool)> {
    let correct_raw = field_line(text, "correct")?;
    let correct = match correct_raw.to_lowercase().as_str() {
        s if s.starts_with("yes") => true,
        s if s.starts_with("no") => false,
        _ => return None,
    };
    let extracted = field_line(text, "extracted_final_answer")
        .filter(|v| !v.is_empty() && !v.eq_ignore_ascii_case("none"))
        .map(str::to_string);
    let reasoning = field_line(text, "reasoning").unwrap_or("").to_string();
    Some((extracted, reasoning, correct))
}

// ---------------------------------------------------------------------------
// Decision judging
// ---------------------------------------------------------------------------

fn metric_prompt(
    metric: MetricKind,
    state_summary: &str,
    decision: &MetaDecision,
    gold: Option<&str>,
) -> String {
    let question = match metric {
        MetricKind::Par => "Explain whether persisting was appropriate in this situation.",
        MetricKind::Pvr => "Explain whether pivoting was the right action here.",
        MetricKind::Ca => "Explain whether concluding was accurate given the ground truth.",
        MetricKind::Erc => {
            "Explain whether continuing was necessary to avoid submitting an incorrect answer."
        }
    };
    let mut prompt = format!(
        "[state]: {state_summary}\n[decision]: {} — {}\n",
        decision.verdict.as_str(),
        decision.rationale
    );
    if let Some(gold) = gold {
        prompt.push_str(&format!("[ground_truth_answer]: {gold}\n"));
    }
    prompt.push_str(&format!(
        "\nReply in exactly this format:\nreasoning: {question}\n{}: yes or no",
        metric.answer_field()
    ));
    prompt
}

/// One judge completion with the metric's template; yes/no parsed into
/// `correct`. CA and ERC require the gold answer.
pub fn judge_decision(
    state_summary: &str,
    decision: &MetaDecision,
    metric: MetricKind,
    gold_answer: Option<&str>,
    judge: &Gateway,
    trajectory_ref: &str,
) -> Result<DecisionJudgment, EvalError> {
    if metric.needs_gold() && gold_answer.is_none() {
        return Err(EvalError::MissingGold(metric));
    }
    let request = ChatRequest::new(vec![ChatMessage::user(metric_prompt(
        metric,
        state_summary,
        decision,
        gold_answer,
    ))]);
    let reply = judge.complete(Component::Judge, &request)?;
    let (correct, reasoning) = match field_line(&reply.text, metric.answer_field()) {
        Some(value) if value.to_lowercase().starts_with("yes") => (
            true,
            field_line(&reply.text, "reasoning")
                .unwrap_or("")
                .to_string(),
        ),
        Some(value) if value.to_lowercase().starts_with("no") => (
            false,
            field_line(&reply.text, "reasoning")
                .unwrap_or("")
                .to_string(),
        ),
        _ => (false, format!("unparseable judge reply: {}", reply.text)),
    };
    Ok(DecisionJudgment {
        metric,
        correct,
        reasoning,
        trajectory_ref: trajectory_ref.to_string(),
    })
}

/// Which metrics a turn's decision is judged under: PAR for the
/// continue-family (CONTINUE, VERIFY), PVR for pivots (REPLAN, REFLECT),
/// CA for STOP, and ERC for any non-STOP decision taken after the turn
/// produced an intermediate answer.
pub fn metrics_for_turn(turn: &crate::model::TurnRecord) -> Vec<MetricKind> {
    let mut metrics = Vec::new();
    match turn.decision.verdict {
        MetaVerdict::Continue | MetaVerdict::Verify => metrics.push(MetricKind::Par),
        MetaVerdict::Replan | MetaVerdict::Reflect => metrics.push(MetricKind::Pvr),
        MetaVerdict::Stop => metrics.push(MetricKind::Ca),
    }
    let answered = turn
        .trajectory
        .steps
        .iter()
        .any(|s| s.kind == StepKind::Answer);
    if answered && turn.decision.verdict != MetaVerdict::Stop {
        metrics.push(MetricKind::Erc);
    }
    metrics
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

/// Pure fold of verdicts and judgments into rates; permutation-invariant.
pub fn compute_metrics(
    verdicts: &[Verdict],
    judgments: &[DecisionJudgment],
    tokens: TokenReport,
) -> MetricsReport {
    let mut counts = ReportCounts::default();
    for verdict in verdicts {
        counts.pass.total += 1;
        counts.pass.correct += u64::from(verdict.correct);
    }
    for judgment in judgments {
        let slot = match judgment.metric {
            MetricKind::Par => &mut counts.par,
            MetricKind::Pvr => &mut counts.pvr,
            MetricKind::Ca => &mut counts.ca,
            MetricKind::Erc => &mut counts.erc,
        };
        slot.total += 1;
        slot.correct += u64::from(judgment.correct);
    }
    let (par, pvr, ca, erc) = (
        counts.par.rate(),
        counts.pvr.rate(),
        counts.ca.rate(),
        counts.erc.rate(),
    );
    let strategy_adequacy = match (par, pvr, ca, erc) {
        (Some(a), Some(b), Some(c), Some(d)) => Some((a + b + c + d) / 4.0),
        _ => None,
    };
    MetricsReport {
        pass_at_1: counts.pass.rate(),
        par,
        pvr,
        ca,
        erc,
        strategy_adequacy,
        counts,
        tokens,
    }
}

fn fmt_rate(rate: Option<f64>) -> String {
    match rate {
        Some(r) => format!("{r:.2}"),
        None => "—".to_string(),
    }
}

impl MetricsReport {
    /// Plain-text table with the pass rate, per-component and total
    /// tokens, the four decision rates, and their mean.
    pub fn render_table(&self) -> String {
        let headers = [
            "Pass@1",
            "Main Tok",
            "Meta Tok",
            "Ctx Tok",
            "Synth Tok",
            "Total Tok",
            "PAR",
            "PVR",
            "CA",
            "ERC",
            "Strategy Adequacy",
        ];
        let values = [
            fmt_rate(self.pass_at_1),
            self.tokens.main_tokens.to_string(),
            self.tokens.meta_tokens.to_string(),
            self.tokens.context_tokens.to_string(),
            self.tokens.synthesizer_tokens.to_string(),
            self.tokens.total.to_string(),
            fmt_rate(self.par),
            fmt_rate(self.pvr),
            fmt_rate(self.ca),
            fmt_rate(self.erc),
            fmt_rate(self.strategy_adequacy),
        ];
        let widths: Vec<usize> = headers
            .iter()
            .zip(&values)
            .map(|(h, v)| h.len().max(v.len()))
            .collect();
        let row = |cells: Vec<String>| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}", w = w))
                .collect::<Vec<_>>()
                .join("  ")
        };
        format!(
            "{}\n{}\n",
            row(headers.iter().map(|s| s.to_string()).collect()),
            row(values.to_vec())
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

// ---------------------------------------------------------------------------
// Batch evaluation over run logs
// ---------------------------------------------------------------------------

/// Labels file: JSON object mapping question id to gold answer.
pub fn load_labels(path: &Path) -> Result<BTreeMap<String, String>, EvalError> {
    let body = std::fs::read_to_string(path)
        .map_err(|e| EvalError::Io(format!("labels {path:?}: {e}")))?;
    serde_json::from_str(&body).map_err(|e| EvalError::Io(format!("labels {path:?}: {e}")))
}

/// Grades and judges a batch of replayed runs against a labels map.
pub fn evaluate_runs(
    runs: &[(crate::model::Query, RunResult)],
    labels: &BTreeMap<String, String>,
    judge: &Gateway,
) -> Result<MetricsReport, EvalError> {
    let mut verdicts = Vec::new();
    let mut judgments = Vec::new();
    let mut tokens = TokenReport::default();
    for (query, result) in runs {
        tokens = tokens.add(&result.tokens);
        let Some(gold) = labels.get(&query.id) else {
            continue;
        };
        verdicts.push(grade_answer(&query.text, &result.answer, gold, judge)?);
        for (turn_index, turn) in result.per_turn.iter().enumerate() {
            let state = format!(
                "task: {}\nbrief: {}\ntrace:\n{}",
                query.text,
                turn.brief.task,
                turn.trajectory.render_compact()
            );
            let locator = format!("{}/turn-{}", result.run_id, turn_index);
            for metric in metrics_for_turn(turn) {
                judgments.push(judge_decision(
                    &state,
                    &turn.decision,
                    metric,
                    Some(gold.as_str()),
                    judge,
                    &locator,
                )?);
            }
        }
    }
    Ok(compute_metrics(&verdicts, &judgments, tokens))
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("gold answer is empty")]
    EmptyGold,
    #[error("{} judging requires a gold answer", .0.as_str())]
    MissingGold(MetricKind),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("eval io failure: {0}")]
    Io(String),
}
