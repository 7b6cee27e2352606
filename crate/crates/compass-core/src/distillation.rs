//! Mines run logs into training datasets: per-turn SFT records with
//! category weights, and scored preference pairs over candidate briefs.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context_manager::render_brief;
use crate::model::{ContextBrief, MetaVerdict, NoteStore, Query, RunResult, StepKind, StopReason};
use crate::tools::TOOL_ERROR_PREFIX;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// Weight multiplier for recovery-sequence records.
const RECOVERY_WEIGHT: f64 = 2.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SftCategory {
    DirectSuccess,
    RecoverySequence,
    VerificationPattern,
}

/// One supervised example: the synthesis input (trajectory + notes +
/// decision) paired with the brief that was produced for the next turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub input: String,
    pub target: String,
    pub category: SftCategory,
    pub weight: f64,
}

impl SftRecord {
    fn new(input: String, target: String, category: SftCategory) -> Self {
        let weight = match category {
            SftCategory::RecoverySequence => RECOVERY_WEIGHT,
            _ => 1.0,
        };
        Self {
            input,
            target,
            category,
            weight,
        }
    }
}

/// Success indicator minus a token penalty of one unit per thousand
/// tokens; strictly decreasing in tokens, increasing in success.
pub fn composite_score(success: bool, tokens: u64) -> f64 {
    let indicator = if success { 1.0 } else { 0.0 };
    indicator - (tokens as f64) / 1000.0
}

/// One candidate brief with the outcome of executing the pipeline under
/// it. `score` always carries the composite formula; `adequacy` is
/// bookkeeping only and never folds into the score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateOutcome {
    pub label: usize,
    pub brief: ContextBrief,
    pub success: bool,
    pub tokens: u64,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adequacy: Option<f64>,
}

impl CandidateOutcome {
    pub fn new(label: usize, brief: ContextBrief, success: bool, tokens: u64) -> Self {
        Self {
            label,
            brief,
            success,
            tokens,
            score: composite_score(success, tokens),
            adequacy: None,
        }
    }
}

/// An ordered preference: the chosen candidate strictly outscores the
/// rejected one and `margin` is their score difference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub chosen: CandidateOutcome,
    pub rejected: CandidateOutcome,
    pub margin: f64,
}

/// Pair construction knobs. `all_pairs` emits every ordered pair from the
/// ranking (up to C(k,2)); disabling it keeps only adjacent ranks.
#[derive(Debug, Clone, Copy)]
pub struct PairConfig {
    pub all_pairs: bool,
    /// Pairs with a smaller score margin are dropped.
    pub min_margin: f64,
    /// Chosen may not spend more than this ratio of the rejected tokens
    /// when both candidates have the same success outcome.
    pub token_ratio: f64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            all_pairs: true,
            min_margin: 0.05,
            token_ratio: 1.2,
        }
    }
}

/// Why a (chosen, rejected) pairing was excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairExclusion {
    BothFailed,
    MarginTooSmall,
    TokenBloat,
}

/// The per-pair filters, applied to an already-ordered pairing.
pub fn pair_exclusion(
    chosen: &CandidateOutcome,
    rejected: &CandidateOutcome,
    config: &PairConfig,
) -> Option<PairExclusion> {
    if !chosen.success && !rejected.success {
        return Some(PairExclusion::BothFailed);
    }
    if chosen.success == rejected.success
        && (chosen.tokens as f64) > config.token_ratio * (rejected.tokens as f64)
    {
        return Some(PairExclusion::TokenBloat);
    }
    if chosen.score - rejected.score < config.min_margin {
        return Some(PairExclusion::MarginTooSmall);
    }
    None
}

/// Ranks one trajectory's candidates by score (ties: fewer tokens, then
/// lower label) and forms ordered pairs, dropping any pairing a filter
/// excludes. Four candidates with distinct scores and no filter firing
/// yield six pairs.
pub fn build_preference_pairs(
    candidates: &[CandidateOutcome],
    config: &PairConfig,
) -> Vec<PreferencePair> {
    let mut ranked: Vec<&CandidateOutcome> = candidates.iter().collect();
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores are finite")
            .then(a.tokens.cmp(&b.tokens))
            .then(a.label.cmp(&b.label))
    });
    let mut pairs = Vec::new();
    for i in 0..ranked.len() {
        let js: Box<dyn Iterator<Item = usize>> = if config.all_pairs {
            Box::new(i + 1..ranked.len())
        } else {
            Box::new((i + 1..ranked.len()).take(1))
        };
        for j in js {
            let (chosen, rejected) = (ranked[i], ranked[j]);
            if pair_exclusion(chosen, rejected, config).is_none() {
                pairs.push(PreferencePair {
                    chosen: chosen.clone(),
                    rejected: rejected.clone(),
                    margin: chosen.score - rejected.score,
                });
            }
        }
    }
    pairs
}

// ---------------------------------------------------------------------------
// SFT mining
// ---------------------------------------------------------------------------

/// A run offered to the miner. `success` is the labeled correctness of
/// the final answer when labels are available; without labels the
/// degenerate-completion filter stays inert.
#[derive(Debug, Clone)]
pub struct MinedRun {
    pub query: Query,
    pub result: RunResult,
    pub success: Option<bool>,
}

/// Tool-interaction window for kept trajectories.
#[derive(Debug, Clone, Copy)]
pub struct SftFilters {
    pub min_tools: usize,
    pub max_tools: usize,
}

impl Default for SftFilters {
    fn default() -> Self {
        Self {
            min_tools: 3,
            max_tools: 25,
        }
    }
}

/// Constraint-complexity strata, counted from each record's target brief.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrataCounts {
    pub simple: usize,
    pub multi_source: usize,
    pub complex: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MiningReport {
    pub total_runs: usize,
    pub kept_runs: usize,
    pub dropped_tool_window: usize,
    pub dropped_degenerate: usize,
    pub direct_success: usize,
    pub recovery_sequences: usize,
    pub verification_patterns: usize,
    pub strata: StrataCounts,
}

#[derive(Debug, Clone)]
pub struct MiningOutput {
    pub records: Vec<SftRecord>,
    pub report: MiningReport,
}

fn run_has_failed_tool(result: &RunResult) -> bool {
    result.per_turn.iter().any(|t| {
        t.trajectory
            .steps
            .iter()
            .any(|s| s.kind == StepKind::ToolResponse && s.content.starts_with(TOOL_ERROR_PREFIX))
    })
}

fn run_recovered_from_failure(result: &RunResult) -> bool {
    let mut seen_failure = false;
    for turn in &result.per_turn {
        for step in &turn.trajectory.steps {
            if step.kind != StepKind::ToolResponse {
                continue;
            }
            if step.content.starts_with(TOOL_ERROR_PREFIX) {
                seen_failure = true;
            } else if seen_failure {
                return true;
            }
        }
    }
    false
}

fn categorize(result: &RunResult) -> SftCategory {
    let verdicts: Vec<MetaVerdict> = result.per_turn.iter().map(|t| t.decision.verdict).collect();
    if run_recovered_from_failure(result) || verdicts.contains(&MetaVerdict::Replan) {
        return SftCategory::RecoverySequence;
    }
    let stop_at = verdicts.iter().position(|v| *v == MetaVerdict::Stop);
    let verify_before_stop = match stop_at {
        Some(stop) => verdicts[..stop].contains(&MetaVerdict::Verify),
        None => false,
    };
    if verify_before_stop {
        SftCategory::VerificationPattern
    } else {
        SftCategory::DirectSuccess
    }
}

fn is_degenerate(run: &MinedRun) -> bool {
    if run.success != Some(true) {
        return false;
    }
    let strategic = run.result.per_turn.iter().any(|t| {
        matches!(
            t.decision.verdict,
            MetaVerdict::Reflect | MetaVerdict::Replan | MetaVerdict::Verify
        )
    });
    !strategic && !run_has_failed_tool(&run.result)
}

/// The synthesis input as the context manager saw it when producing the
/// brief for `turn`: prior trajectory, the notes available then, and the
/// prior decision.
fn render_sft_input(run: &MinedRun, turn: usize) -> String {
    let available = NoteStore {
        records: run
            .result
            .notes
            .records
            .iter()
            .take(turn + 1)
            .cloned()
            .collect(),
    };
    let trajectory = if turn == 0 {
        "(no turns executed yet)".to_string()
    } else {
        run.result.per_turn[turn - 1].trajectory.render_compact()
    };
    let verdict = if turn == 0 {
        "none yet".to_string()
    } else {
        let d = &run.result.per_turn[turn - 1].decision;
        format!("{} — {}", d.verdict.as_str(), d.rationale)
    };
    format!(
        "Task: {}\n\nNotes:\n{}\nLatest turn:\n{}\nSupervisor verdict: {}",
        run.query.text,
        crate::context_manager::render_notes(&available),
        trajectory,
        verdict
    )
}

fn stratum(brief: &ContextBrief) -> Stratum {
    match brief.constraints.len() {
        0 | 1 => Stratum::Simple,
        2 | 3 => Stratum::MultiSource,
        _ => Stratum::Complex,
    }
}

enum Stratum {
    Simple,
    MultiSource,
    Complex,
}

/// Filters runs to the tool-interaction window, drops degenerate
/// completions, categorizes the survivors, and emits one weighted record
/// per turn.
pub fn mine_sft_examples(runs: &[MinedRun], filters: &SftFilters) -> MiningOutput {
    let mut report = MiningReport {
        total_runs: runs.len(),
        ..MiningReport::default()
    };
    let mut records = Vec::new();
    for run in runs {
        let tools = run.result.tool_call_count();
        if tools < filters.min_tools || tools > filters.max_tools {
            report.dropped_tool_window += 1;
            continue;
        }
        if is_degenerate(run) {
            report.dropped_degenerate += 1;
            continue;
        }
        let category = categorize(&run.result);
        match category {
            SftCategory::DirectSuccess => report.direct_success += 1,
            SftCategory::RecoverySequence => report.recovery_sequences += 1,
            SftCategory::VerificationPattern => report.verification_patterns += 1,
        }
        report.kept_runs += 1;
        for (turn, record) in run.result.per_turn.iter().enumerate() {
            match stratum(&record.brief) {
                Stratum::Simple => report.strata.simple += 1,
                Stratum::MultiSource => report.strata.multi_source += 1,
                Stratum::Complex => report.strata.complex += 1,
            }
            records.push(SftRecord::new(
                render_sft_input(run, turn),
                render_brief(&record.brief),
                category,
            ));
        }
    }
    MiningOutput { records, report }
}

/// Groups replayed runs by query id into candidate sets for pair
/// construction. Candidate labels follow run-id order; the candidate
/// brief is the run's first-turn brief. Success comes from `labels` when
/// the answer grades correct offline, otherwise from the completion
/// indicator (a supervisor STOP).
pub fn candidates_from_runs(runs: &[MinedRun]) -> Vec<(String, Vec<CandidateOutcome>)> {
    let mut by_query: BTreeMap<String, Vec<&MinedRun>> = BTreeMap::new();
    for run in runs {
        by_query.entry(run.query.id.clone()).or_default().push(run);
    }
    by_query
        .into_iter()
        .map(|(query_id, mut group)| {
            group.sort_by(|a, b| a.result.run_id.cmp(&b.result.run_id));
            let outcomes = group
                .into_iter()
                .enumerate()
                .map(|(label, run)| {
                    let success = run
                        .success
                        .unwrap_or(run.result.stop_reason == StopReason::MetaStop);
                    let brief = run
                        .result
                        .per_turn
                        .first()
                        .map(|t| t.brief.clone())
                        .expect("runs hold at least one turn");
                    CandidateOutcome::new(label, brief, success, run.result.tokens.total)
                })
                .collect();
            (query_id, outcomes)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    schema_version: u32,
    kind: String,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct PairLine {
    chosen: CandidateOutcome,
    rejected: CandidateOutcome,
    margin: f64,
    trajectory_id: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EmitCounts {
    pub sft_records: usize,
    pub preference_pairs: usize,
}

/// Writes both JSON-Lines datasets (header line first) and reports counts.
pub fn emit_datasets(
    records: &[SftRecord],
    pairs: &[(String, PreferencePair)],
    sft_path: &Path,
    pairs_path: &Path,
) -> Result<EmitCounts, DistillError> {
    write_dataset(sft_path, "sft", records.len(), records.iter())?;
    let lines: Vec<PairLine> = pairs
        .iter()
        .map(|(trajectory_id, pair)| PairLine {
            chosen: pair.chosen.clone(),
            rejected: pair.rejected.clone(),
            margin: pair.margin,
            trajectory_id: trajectory_id.clone(),
        })
        .collect();
    write_dataset(pairs_path, "preference_pairs", lines.len(), lines.iter())?;
    Ok(EmitCounts {
        sft_records: records.len(),
        preference_pairs: pairs.len(),
    })
}

fn write_dataset<'a, T: Serialize + 'a>(
    path: &Path,
    kind: &str,
    count: usize,
    lines: impl Iterator<Item = &'a T>,
) -> Result<(), DistillError> {
    let file = std::fs::File::create(path)
        .map_err(|e| DistillError::IoFailure(format!("{path:?}: {e}")))?;
    let mut out = BufWriter::new(file);
    let header = DatasetHeader {
        schema_version: DATASET_SCHEMA_VERSION,
        kind: kind.to_string(),
        count,
    };
    serde_json::to_writer(&mut out, &header).map_err(|e| DistillError::IoFailure(e.to_string()))?;
    out.write_all(b"\n")
        .map_err(|e| DistillError::IoFailure(e.to_string()))?;
    for line in lines {
        serde_json::to_writer(&mut out, line)
            .map_err(|e| DistillError::IoFailure(e.to_string()))?;
        out.write_all(b"\n")
            .map_err(|e| DistillError::IoFailure(e.to_string()))?;
    }
    out.flush()
        .map_err(|e| DistillError::IoFailure(e.to_string()))
}

/// Reads an SFT dataset back; the inverse of the emitter.
pub fn read_sft_dataset(path: &Path) -> Result<Vec<SftRecord>, DistillError> {
    read_dataset(path, "sft")
}

/// Reads a preference dataset back as (trajectory id, pair) rows.
pub fn read_preference_dataset(path: &Path) -> Result<Vec<(String, PreferencePair)>, DistillError> {
    let lines: Vec<PairLine> = read_dataset(path, "preference_pairs")?;
    Ok(lines
        .into_iter()
        .map(|l| {
            (
                l.trajectory_id,
                PreferencePair {
                    chosen: l.chosen,
                    rejected: l.rejected,
                    margin: l.margin,
                },
            )
        })
        .collect())
}

fn read_dataset<T: for<'de> Deserialize<'de>>(
    path: &Path,
    kind: &str,
) -> Result<Vec<T>, DistillError> {
    let file =
        std::fs::File::open(path).map_err(|e| DistillError::IoFailure(format!("{path:?}: {e}")))?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| DistillError::IoFailure("dataset missing header".into()))?
        .map_err(|e| DistillError::IoFailure(e.to_string()))?;
    let header: DatasetHeader = serde_json::from_str(&header_line)
        .map_err(|e| DistillError::IoFailure(format!("bad header: {e}")))?;
    if header.kind != kind {
        return Err(DistillError::IoFailure(format!(
            "expected {kind} dataset, found {}",
            header.kind
        )));
    }
    lines
        .map(|line| {
            let line = line.map_err(|e| DistillError::IoFailure(e.to_string()))?;
            serde_json::from_str(&line).map_err(|e| DistillError::IoFailure(e.to_string()))
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("dataset io failure: {0}")]
    IoFailure(String),
}
