//! The outer loop: plan, synthesize context, execute a monitored turn,
//! collect the strategic decision, update notes, and stop on STOP or at
//! the iteration cap. Also the parallel-sampling modes and candidate
//! aggregation.

use std::path::PathBuf;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::context_manager::{
    extract_answer, parse_brief, render_brief, synthesize_context, update_notes, BriefConfig,
    ContextError,
};
use crate::gateway::{CallRecord, ChatMessage, ChatRequest, Component, Gateway, GatewayError};
use crate::main_agent::{execute_turn, TurnEnv, DEFAULT_SYSTEM_INSTRUCTIONS};
use crate::meta_thinker::{get_decision, initialize, MetaError, MonitorHandle, TriggerConfig};
use crate::model::{
    ContextBrief, MetaDecision, MetaVerdict, ModelError, Query, RunConfig, RunMode, RunResult,
    StaticContext, StopReason, TokenReport, TurnRecord,
};
use crate::tools::ToolRegistry;

/// Stable hash of the canonical config JSON; pins replay identity.
pub fn config_hash(config: &RunConfig) -> String {
    let body = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(body.as_bytes());
    digest.iter().take(12).map(|b| format!("{b:02x}")).collect()
}

fn run_id_for(config_hash: &str, query: &Query) -> String {
    let digest = Sha256::digest(format!("{config_hash}:{}", query.id).as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Folds a gateway call log into per-component token usage.
pub fn token_report_from(log: &[CallRecord]) -> TokenReport {
    let mut sums = [0u64; 4];
    for record in log {
        let slot = match record.component {
            Component::Main => 0,
            Component::Meta => 1,
            Component::Context => 2,
            Component::Synthesizer => 3,
            Component::Judge => continue,
        };
        sums[slot] += record.prompt_tokens + record.completion_tokens;
    }
    TokenReport::from_components(sums[0], sums[1], sums[2], sums[3])
}

/// Where run artifacts land; both optional.
#[derive(Debug, Clone, Default)]
pub struct RunPaths {
    /// Note-store JSON, rewritten atomically at each update.
    pub notes: Option<PathBuf>,
}

fn save_notes(notes: &crate::model::NoteStore, paths: &RunPaths) -> Result<(), OrchestratorError> {
    if let Some(path) = &paths.notes {
        notes
            .save_json(path)
            .map_err(|e| OrchestratorError::Io(e.to_string()))?;
    }
    Ok(())
}

/// Retries a phase once when the backend timed out; every other error is
/// final. Tool retries live in the tool module.
fn with_retry<T, E: Into<OrchestratorError>>(
    mut phase: impl FnMut() -> Result<T, E>,
) -> Result<T, OrchestratorError> {
    match phase() {
        Ok(value) => Ok(value),
        Err(first) => match first.into() {
            OrchestratorError::Gateway(GatewayError::BackendUnreachable(_)) => {
                phase().map_err(Into::into)
            }
            other => Err(other),
        },
    }
}

/// Executes one full single-pipeline run (Algorithm shape: initialize →
/// per turn synthesize / execute / decide / update → answer on STOP or at
/// the final turn).
pub fn run(
    query: &Query,
    config: &RunConfig,
    gateway: &Gateway,
    registry: &ToolRegistry,
) -> Result<RunResult, OrchestratorError> {
    run_with_paths(query, config, gateway, registry, &RunPaths::default())
}

pub fn run_with_paths(
    query: &Query,
    config: &RunConfig,
    gateway: &Gateway,
    registry: &ToolRegistry,
    paths: &RunPaths,
) -> Result<RunResult, OrchestratorError> {
    config.validate()?;
    if config.mode != RunMode::Single {
        return Err(OrchestratorError::WrongMode(
            "run requires single mode".into(),
        ));
    }
    run_pipeline(query, config, gateway, registry, paths, 1, 1)
}

/// Shared pipeline; `mt_samples`/`cm_samples` of 1 mean plain execution.
fn run_pipeline(
    query: &Query,
    config: &RunConfig,
    gateway: &Gateway,
    registry: &ToolRegistry,
    paths: &RunPaths,
    mt_samples: usize,
    cm_samples: usize,
) -> Result<RunResult, OrchestratorError> {
    let cfg_hash = config_hash(config);
    let run_id = run_id_for(&cfg_hash, query);
    let static_ctx = StaticContext::new(
        query.clone(),
        registry.specs(),
        DEFAULT_SYSTEM_INSTRUCTIONS.to_string(),
    );
    let brief_cfg = BriefConfig {
        token_budget: config.brief_token_budget,
        ..BriefConfig::default()
    };

    let mut notes = with_retry(|| initialize(query, gateway, &config.sampling))?;
    save_notes(&notes, paths)?;

    let mut monitor = MonitorHandle::new(TriggerConfig::default(), config.deterministic_monitor);
    let mut per_turn: Vec<TurnRecord> = Vec::new();
    let mut last_decision: Option<MetaDecision> = None;

    for turn in 0..config.t_max {
        let brief = synthesize_brief_sampled(
            query,
            &notes,
            per_turn.last().map(|t| &t.trajectory),
            last_decision.as_ref(),
            gateway,
            config,
            &brief_cfg,
            turn,
            cm_samples,
        )?;

        let env = TurnEnv {
            gateway,
            registry,
            static_ctx: &static_ctx,
            sampling: config.sampling.clone(),
            i_max: config.i_max,
            tool_retry_cap: config.tool_retry_cap,
        };
        let trajectory = execute_turn(&env, turn, &brief, &mut monitor)?;
        let monitor_state = monitor.snapshot();

        let decision = decide_sampled(
            &trajectory,
            &brief,
            &monitor_state,
            gateway,
            config,
            mt_samples,
        )?;

        update_notes(&mut notes, &brief, turn)?;
        save_notes(&notes, paths)?;
        per_turn.push(TurnRecord {
            brief,
            trajectory,
            decision,
        });

        let decision = &per_turn.last().expect("just pushed").decision;
        if decision.verdict == MetaVerdict::Stop || turn == config.t_max - 1 {
            let last = per_turn.last().expect("at least one turn");
            let answer = with_retry(|| {
                extract_answer(&last.trajectory, &notes, query, gateway, &config.sampling)
            })?;
            let stop_reason = if decision.verdict == MetaVerdict::Stop {
                StopReason::MetaStop
            } else {
                StopReason::TMaxReached
            };
            return Ok(RunResult {
                run_id,
                config_hash: cfg_hash,
                answer,
                per_turn,
                notes,
                tokens: token_report_from(&gateway.call_log()),
                stop_reason,
            });
        }
        last_decision = Some(per_turn.last().expect("just pushed").decision.clone());
    }
    unreachable!("loop always returns at the final turn")
}

/// One decision, or `n` sampled decisions merged by majority. Failed
/// candidates are dropped; when every sample fails to parse, the run
/// defaults to CONTINUE with the failure recorded in the rationale.
fn decide_sampled(
    trajectory: &crate::model::Trajectory,
    brief: &ContextBrief,
    monitor: &crate::meta_thinker::MonitorState,
    gateway: &Gateway,
    config: &RunConfig,
    samples: usize,
) -> Result<MetaDecision, OrchestratorError> {
    let mut candidates = Vec::new();
    let mut last_parse_failure = None;
    for label in 0..samples {
        match with_retry(|| get_decision(trajectory, brief, monitor, gateway, &config.sampling)) {
            Ok(decision) => candidates.push(TtsCandidate {
                label,
                payload: CandidatePayload::Decision(decision),
                tokens: 0,
            }),
            Err(OrchestratorError::Meta(MetaError::DecisionParse { raw })) => {
                last_parse_failure = Some(raw);
            }
            Err(other) => return Err(other),
        }
    }
    if candidates.is_empty() {
        let raw = last_parse_failure.unwrap_or_default();
        return Ok(MetaDecision {
            verdict: MetaVerdict::Continue,
            rationale: format!("decision parse failed; defaulting to CONTINUE ({raw:?})"),
            raised_by_trigger: monitor.triggered,
        });
    }
    match synthesize_candidates(&candidates, gateway)? {
        CandidatePayload::Decision(decision) => Ok(decision),
        _ => unreachable!("decision candidates merge to a decision"),
    }
}

/// One brief, or `n` sampled briefs distilled into one. A sample that
/// fails to parse is dropped; at least one must survive.
#[allow(clippy::too_many_arguments)]
fn synthesize_brief_sampled(
    query: &Query,
    notes: &crate::model::NoteStore,
    last_trajectory: Option<&crate::model::Trajectory>,
    decision: Option<&MetaDecision>,
    gateway: &Gateway,
    config: &RunConfig,
    brief_cfg: &BriefConfig,
    turn: usize,
    samples: usize,
) -> Result<ContextBrief, OrchestratorError> {
    let mut candidates = Vec::new();
    let mut last_error = None;
    for label in 0..samples {
        match with_retry(|| {
            synthesize_context(
                query,
                notes,
                last_trajectory,
                decision,
                gateway,
                &config.sampling,
                brief_cfg,
                turn,
            )
        }) {
            Ok(brief) => candidates.push(TtsCandidate {
                label,
                payload: CandidatePayload::Brief(brief),
                tokens: 0,
            }),
            Err(err @ OrchestratorError::Context(ContextError::BriefParse(_))) => {
                last_error = Some(err)
            }
            Err(other) => return Err(other),
        }
    }
    let Some(first) = candidates.first() else {
        return Err(last_error.unwrap_or(OrchestratorError::NoSurvivingCandidates));
    };
    if candidates.len() == 1 {
        let CandidatePayload::Brief(brief) = &first.payload else {
            unreachable!()
        };
        return Ok(brief.clone());
    }
    match synthesize_candidates(&candidates, gateway)? {
        CandidatePayload::Brief(mut brief) => {
            brief.turn_id = turn;
            Ok(brief)
        }
        _ => unreachable!("brief candidates merge to a brief"),
    }
}

// ---------------------------------------------------------------------------
// Parallel sampling
// ---------------------------------------------------------------------------

/// One sampled alternative: a whole run, a decision, or a brief.
#[derive(Debug, Clone, PartialEq)]
pub enum CandidatePayload {
    FullRun(Box<RunResult>),
    Decision(MetaDecision),
    Brief(ContextBrief),
}

impl CandidatePayload {
    /// Exact-match key used by the majority vote.
    fn vote_key(&self) -> String {
        match self {
            CandidatePayload::FullRun(result) => result.answer.clone(),
            CandidatePayload::Decision(decision) => decision.verdict.as_str().to_string(),
            CandidatePayload::Brief(brief) => render_brief(brief),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtsCandidate {
    pub label: usize,
    pub payload: CandidatePayload,
    pub tokens: u64,
}

/// Temperatures cycled across diversified full-pipeline samples.
pub const DIVERSIFICATION_TEMPERATURES: [f64; 4] = [0.7, 0.9, 1.1, 1.3];

/// Per-sample config for full-pipeline sampling: seed shifted by the
/// label, temperature cycled, and the pipeline itself runs single mode.
pub fn diversified_config(config: &RunConfig, label: usize) -> RunConfig {
    let mut cfg = config.clone();
    cfg.mode = RunMode::Single;
    cfg.n_samples = 1;
    cfg.sampling.seed = config.sampling.seed.map(|s| s + label as u64);
    cfg.sampling.temperature =
        DIVERSIFICATION_TEMPERATURES[label % DIVERSIFICATION_TEMPERATURES.len()];
    cfg
}

/// Runs the configured parallel-sampling mode and aggregates candidates
/// into one result.
pub fn run_tts(
    query: &Query,
    config: &RunConfig,
    gateway: &Gateway,
    registry: &ToolRegistry,
) -> Result<RunResult, OrchestratorError> {
    config.validate()?;
    let n = config.n_samples;
    match config.mode {
        RunMode::Single => Err(OrchestratorError::WrongMode(
            "run_tts requires a sampling mode".into(),
        )),
        RunMode::FullPs => run_full_ps(query, config, gateway, registry, n),
        RunMode::MtPs => {
            let mut cfg = config.clone();
            cfg.mode = RunMode::Single;
            cfg.n_samples = 1;
            run_pipeline(
                query,
                &cfg,
                &gateway.for_run(),
                &registry.for_run(),
                &RunPaths::default(),
                n,
                1,
            )
        }
        RunMode::CmPs => {
            let mut cfg = config.clone();
            cfg.mode = RunMode::Single;
            cfg.n_samples = 1;
            run_pipeline(
                query,
                &cfg,
                &gateway.for_run(),
                &registry.for_run(),
                &RunPaths::default(),
                1,
                n,
            )
        }
    }
}

fn run_full_ps(
    query: &Query,
    config: &RunConfig,
    gateway: &Gateway,
    registry: &ToolRegistry,
    n: usize,
) -> Result<RunResult, OrchestratorError> {
    // fan out one fresh pipeline per sample; join in label order
    let outcomes: Vec<Result<RunResult, OrchestratorError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n)
            .map(|label| {
                let cfg = diversified_config(config, label);
                let pipeline_gateway = gateway.for_run();
                let pipeline_registry = registry.for_run();
                scope.spawn(move || {
                    run_pipeline(
                        query,
                        &cfg,
                        &pipeline_gateway,
                        &pipeline_registry,
                        &RunPaths::default(),
                        1,
                        1,
                    )
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("pipeline thread does not panic"))
            .collect()
    });

    let candidates: Vec<TtsCandidate> = outcomes
        .into_iter()
        .enumerate()
        .filter_map(|(label, outcome)| outcome.ok().map(|r| (label, r)))
        .map(|(label, result)| TtsCandidate {
            label,
            tokens: result.tokens.total,
            payload: CandidatePayload::FullRun(Box::new(result)),
        })
        .collect();
    if candidates.is_empty() {
        return Err(OrchestratorError::NoSurvivingCandidates);
    }
    if candidates.len() == 1 {
        let CandidatePayload::FullRun(result) = candidates.into_iter().next().expect("one").payload
        else {
            unreachable!()
        };
        return Ok(*result);
    }

    let aggregate_gateway = gateway.for_run();
    let merged_answer = match synthesize_candidates(&candidates, &aggregate_gateway)? {
        CandidatePayload::FullRun(result) => result.answer,
        _ => unreachable!("full-run candidates merge to a full run"),
    };

    // base result: the lowest-label candidate that produced the merged
    // answer, falling back to the lowest label overall for merged text
    let base = candidates
        .iter()
        .find(|c| matches!(&c.payload, CandidatePayload::FullRun(r) if r.answer == merged_answer))
        .unwrap_or(&candidates[0]);
    let CandidatePayload::FullRun(base_result) = &base.payload else {
        unreachable!()
    };

    let mut tokens = TokenReport::default();
    for candidate in &candidates {
        if let CandidatePayload::FullRun(result) = &candidate.payload {
            tokens = tokens.add(&result.tokens);
        }
    }
    tokens = tokens.add(&token_report_from(&aggregate_gateway.call_log()));

    let mut merged = (**base_result).clone();
    merged.answer = merged_answer;
    merged.tokens = tokens;
    Ok(merged)
}

const ANSWER_SYNTH_PROMPT: &str = "Several candidate answers to the same task are listed, one \
per line as `label: answer`. Reply with the single best final answer text and nothing else.";
const DECISION_SYNTH_PROMPT: &str = "Several supervisor verdicts for the same turn are listed, \
one per line as `label: verdict — rationale`. Merge them into the one verdict to apply and \
reply with that verdict token (CONTINUE, REFLECT, REPLAN, VERIFY, or STOP) plus a one-line \
rationale.";
const BRIEF_SYNTH_PROMPT: &str = "Several candidate context briefs are listed, separated by \
`---`. Distill them into one brief in the same six numbered sections and reply with only it.";

/// Aggregates candidates: exact-match majority first; on ties or
/// all-distinct payloads one synthesis completion picks or merges, and an
/// abstaining or unusable reply falls back to the lowest label.
pub fn synthesize_candidates(
    candidates: &[TtsCandidate],
    gateway: &Gateway,
) -> Result<CandidatePayload, OrchestratorError> {
    let first = candidates
        .first()
        .ok_or(OrchestratorError::NoSurvivingCandidates)?;
    if candidates.len() == 1 {
        return Ok(first.payload.clone());
    }
    let homogeneous = candidates
        .iter()
        .all(|c| std::mem::discriminant(&c.payload) == std::mem::discriminant(&first.payload));
    if !homogeneous {
        return Err(OrchestratorError::MixedCandidates);
    }

    // vote: count exact-match groups in label order
    let mut groups: Vec<(String, usize, usize)> = Vec::new(); // key, count, lowest label index
    for (index, candidate) in candidates.iter().enumerate() {
        let key = candidate.payload.vote_key();
        match groups.iter_mut().find(|(k, _, _)| *k == key) {
            Some((_, count, _)) => *count += 1,
            None => groups.push((key, 1, index)),
        }
    }
    let best = groups
        .iter()
        .map(|(_, count, _)| *count)
        .max()
        .expect("non-empty");
    let winners: Vec<&(String, usize, usize)> = groups
        .iter()
        .filter(|(_, count, _)| *count == best)
        .collect();
    if winners.len() == 1 && best > 1 {
        return Ok(candidates[winners[0].2].payload.clone());
    }

    // tied or all-distinct: one synthesis completion
    let fallback = candidates[0].payload.clone();
    let (system, listing) = match &first.payload {
        CandidatePayload::FullRun(_) => (
            ANSWER_SYNTH_PROMPT,
            candidates
                .iter()
                .map(|c| format!("{}: {}", c.label, c.payload.vote_key()))
                .collect::<Vec<_>>()
                .join("\n"),
        ),
        CandidatePayload::Decision(_) => (
            DECISION_SYNTH_PROMPT,
            candidates
                .iter()
                .map(|c| {
                    let CandidatePayload::Decision(d) = &c.payload else {
                        unreachable!()
                    };
                    format!("{}: {} — {}", c.label, d.verdict.as_str(), d.rationale)
                })
                .collect::<Vec<_>>()
                .join("\n"),
        ),
        CandidatePayload::Brief(_) => (
            BRIEF_SYNTH_PROMPT,
            candidates
                .iter()
                .map(|c| c.payload.vote_key())
                .collect::<Vec<_>>()
                .join("\n---\n"),
        ),
    };
    let request = ChatRequest::new(vec![
        ChatMessage::system(system),
        ChatMessage::user(listing),
    ]);
    let reply = gateway.complete(Component::Synthesizer, &request)?;
    let text = reply.text.trim();
    if text.is_empty() {
        return Ok(fallback);
    }
    let merged = match &first.payload {
        CandidatePayload::FullRun(_) => candidates
            .iter()
            .find(|c| matches!(&c.payload, CandidatePayload::FullRun(r) if r.answer == text))
            .map(|c| c.payload.clone())
            .unwrap_or_else(|| {
                // merged answer that matches no candidate: carry it on the
                // lowest-label run
                let CandidatePayload::FullRun(base) = &candidates[0].payload else {
                    unreachable!()
                };
                let mut run = (**base).clone();
                run.answer = text.to_string();
                CandidatePayload::FullRun(Box::new(run))
            }),
        CandidatePayload::Decision(_) => match crate::meta_thinker::parse_verdict(text) {
            Some((verdict, rationale)) => CandidatePayload::Decision(MetaDecision {
                verdict,
                rationale,
                raised_by_trigger: candidates.iter().any(
                    |c| matches!(&c.payload, CandidatePayload::Decision(d) if d.raised_by_trigger),
                ),
            }),
            None => fallback,
        },
        CandidatePayload::Brief(_) => match parse_brief(text) {
            Ok(brief) => CandidatePayload::Brief(brief),
            Err(_) => fallback,
        },
    };
    Ok(merged)
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("wrong mode: {0}")]
    WrongMode(String),
    #[error("all sampled candidates failed")]
    NoSurvivingCandidates,
    #[error("candidate payloads are not homogeneous")]
    MixedCandidates,
    #[error("io failure: {0}")]
    Io(String),
}

impl OrchestratorError {
    /// Backend failures map to CLI exit code 2.
    pub fn is_backend_failure(&self) -> bool {
        matches!(
            self,
            OrchestratorError::Gateway(_)
                | OrchestratorError::Meta(MetaError::Gateway(_))
                | OrchestratorError::Context(ContextError::Gateway(_))
        )
    }
}
