//! Event-per-line run logs: a header with schema version and config hash,
//! then one JSON line per brief, step, decision, note, and final artifact.
//! Logs replay back into the original result, bit-exactly under scripted
//! backends.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context_manager::{parse_brief, render_brief};
use crate::gateway::count_tokens;
use crate::model::{
    MetaDecision, NoteRecord, NoteStore, Query, RunResult, StepKind, StopReason, TokenReport,
    Trajectory, TrajectoryStep, TurnRecord,
};

pub const LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct LogHeader {
    schema_version: u32,
    config_hash: String,
    run_id: String,
    query_id: String,
    query_text: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct LogEvent {
    run_id: String,
    turn: i64,
    step_index: usize,
    kind: String,
    content: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    tool_name: Option<String>,
    tokens: u64,
    component: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunEndPayload {
    stop_reason: StopReason,
    tokens: TokenReport,
}

/// A replayed log: the query it ran and the reconstructed result.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayedRun {
    pub query: Query,
    pub result: RunResult,
}

/// Writes the event-per-line log for a completed run. Runs must hold at
/// least one turn.
pub fn persist_run(result: &RunResult, query: &Query, path: &Path) -> Result<(), LogError> {
    if result.per_turn.is_empty() {
        return Err(LogError::EmptyRun);
    }
    let file = std::fs::File::create(path).map_err(|e| LogError::Io(e.to_string()))?;
    let mut out = BufWriter::new(file);
    let header = LogHeader {
        schema_version: LOG_SCHEMA_VERSION,
        config_hash: result.config_hash.clone(),
        run_id: result.run_id.clone(),
        query_id: query.id.clone(),
        query_text: query.text.clone(),
    };
    write_line(&mut out, &header)?;

    let mut emit = |event: LogEvent| write_line(&mut out, &event);
    let note_event = |record: &NoteRecord, run_id: &str| LogEvent {
        run_id: run_id.to_string(),
        turn: record.round,
        step_index: 0,
        kind: "note".to_string(),
        content: serde_json::to_string(record).expect("note serializes"),
        tool_name: None,
        tokens: 0,
        component: "context".to_string(),
    };

    // the initial plan record precedes the first turn
    if let Some(first) = result.notes.records.first().filter(|r| r.round == -1) {
        emit(note_event(first, &result.run_id))?;
    }
    for (turn_index, turn) in result.per_turn.iter().enumerate() {
        let turn_number = turn_index as i64;
        emit(LogEvent {
            run_id: result.run_id.clone(),
            turn: turn_number,
            step_index: 0,
            kind: "brief".to_string(),
            content: render_brief(&turn.brief),
            tool_name: None,
            tokens: turn.brief.token_count,
            component: "context".to_string(),
        })?;
        for step in &turn.trajectory.steps {
            emit(LogEvent {
                run_id: result.run_id.clone(),
                turn: turn_number,
                step_index: step.index,
                kind: step.kind.as_str().to_string(),
                content: step.content.clone(),
                tool_name: step.tool_name.clone(),
                tokens: step.token_count,
                component: "main".to_string(),
            })?;
        }
        emit(LogEvent {
            run_id: result.run_id.clone(),
            turn: turn_number,
            step_index: 0,
            kind: "decision".to_string(),
            content: serde_json::to_string(&turn.decision).expect("decision serializes"),
            tool_name: None,
            tokens: 0,
            component: "meta".to_string(),
        })?;
        if let Some(record) = result.notes.records.iter().find(|r| r.round == turn_number) {
            emit(note_event(record, &result.run_id))?;
        }
    }

    let last_turn = result.per_turn.len() as i64 - 1;
    emit(LogEvent {
        run_id: result.run_id.clone(),
        turn: last_turn,
        step_index: 0,
        kind: "final_answer".to_string(),
        content: result.answer.clone(),
        tool_name: None,
        tokens: count_tokens(&result.answer),
        component: "synthesizer".to_string(),
    })?;
    emit(LogEvent {
        run_id: result.run_id.clone(),
        turn: last_turn,
        step_index: 1,
        kind: "run_end".to_string(),
        content: serde_json::to_string(&RunEndPayload {
            stop_reason: result.stop_reason,
            tokens: result.tokens,
        })
        .expect("summary serializes"),
        tool_name: None,
        tokens: 0,
        component: "synthesizer".to_string(),
    })?;
    out.flush().map_err(|e| LogError::Io(e.to_string()))
}

fn write_line<T: Serialize>(out: &mut impl Write, value: &T) -> Result<(), LogError> {
    serde_json::to_writer(&mut *out, value).map_err(|e| LogError::Io(e.to_string()))?;
    out.write_all(b"\n")
        .map_err(|e| LogError::Io(e.to_string()))
}

/// Reads a log back into the run it recorded. A missing `run_end` line
/// (truncation), a bad line, or out-of-order events are corruption.
pub fn replay_run(path: &Path) -> Result<ReplayedRun, LogError> {
    let file = std::fs::File::open(path).map_err(|e| LogError::Io(e.to_string()))?;
    let mut lines = std::io::BufReader::new(file).lines();

    let header_line = lines
        .next()
        .ok_or_else(|| LogError::Corrupt("missing header".into()))?
        .map_err(|e| LogError::Io(e.to_string()))?;
    let header: LogHeader = serde_json::from_str(&header_line)
        .map_err(|e| LogError::Corrupt(format!("bad header: {e}")))?;
    if header.schema_version != LOG_SCHEMA_VERSION {
        return Err(LogError::SchemaVersionMismatch {
            expected: LOG_SCHEMA_VERSION,
            got: header.schema_version,
        });
    }

    let mut notes = NoteStore::new();
    let mut per_turn: Vec<TurnRecord> = Vec::new();
    let mut open_brief: Option<(i64, crate::model::ContextBrief)> = None;
    let mut open_trajectory: Option<Trajectory> = None;
    let mut answer: Option<String> = None;
    let mut summary: Option<RunEndPayload> = None;

    let close_turn = |per_turn: &mut Vec<TurnRecord>,
                      open_brief: &mut Option<(i64, crate::model::ContextBrief)>,
                      open_trajectory: &mut Option<Trajectory>,
                      decision: MetaDecision|
     -> Result<(), LogError> {
        let (turn, brief) = open_brief
            .take()
            .ok_or_else(|| LogError::Corrupt("decision before brief".into()))?;
        let trajectory = open_trajectory
            .take()
            .unwrap_or_else(|| Trajectory::new(turn as usize));
        per_turn.push(TurnRecord {
            brief,
            trajectory,
            decision,
        });
        Ok(())
    };

    for line in lines {
        let line = line.map_err(|e| LogError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            return Err(LogError::Corrupt("blank line inside log".into()));
        }
        let event: LogEvent = serde_json::from_str(&line)
            .map_err(|e| LogError::Corrupt(format!("bad event: {e}")))?;
        match event.kind.as_str() {
            "note" => {
                let record: NoteRecord = serde_json::from_str(&event.content)
                    .map_err(|e| LogError::Corrupt(format!("bad note: {e}")))?;
                notes
                    .append(record)
                    .map_err(|e| LogError::Corrupt(e.to_string()))?;
            }
            "brief" => {
                let mut brief = parse_brief(&event.content)
                    .map_err(|e| LogError::Corrupt(format!("bad brief: {e}")))?;
                brief.turn_id = event.turn as usize;
                open_brief = Some((event.turn, brief));
                open_trajectory = Some(Trajectory::new(event.turn as usize));
            }
            "thought" | "tool_call" | "tool_response" | "answer" => {
                let kind = match event.kind.as_str() {
                    "thought" => StepKind::Thought,
                    "tool_call" => StepKind::ToolCall,
                    "tool_response" => StepKind::ToolResponse,
                    _ => StepKind::Answer,
                };
                let trajectory = open_trajectory
                    .as_mut()
                    .ok_or_else(|| LogError::Corrupt("step before brief".into()))?;
                let step = TrajectoryStep::new(
                    event.step_index,
                    kind,
                    event.content,
                    event.tool_name,
                    event.tokens,
                )
                .map_err(|e| LogError::Corrupt(e.to_string()))?;
                trajectory
                    .append_step(step)
                    .map_err(|e| LogError::Corrupt(e.to_string()))?;
            }
            "decision" => {
                let decision: MetaDecision = serde_json::from_str(&event.content)
                    .map_err(|e| LogError::Corrupt(format!("bad decision: {e}")))?;
                close_turn(
                    &mut per_turn,
                    &mut open_brief,
                    &mut open_trajectory,
                    decision,
                )?;
            }
            "final_answer" => answer = Some(event.content),
            "run_end" => {
                summary = Some(
                    serde_json::from_str(&event.content)
                        .map_err(|e| LogError::Corrupt(format!("bad summary: {e}")))?,
                );
            }
            other => return Err(LogError::Corrupt(format!("unknown event kind {other:?}"))),
        }
    }

    let summary = summary.ok_or_else(|| LogError::Corrupt("log ends before run_end".into()))?;
    let answer = answer.ok_or_else(|| LogError::Corrupt("log has no final answer".into()))?;
    if per_turn.is_empty() {
        return Err(LogError::Corrupt("log holds no turns".into()));
    }
    Ok(ReplayedRun {
        query: Query::new(header.query_id, header.query_text)
            .map_err(|e| LogError::Corrupt(e.to_string()))?,
        result: RunResult {
            run_id: header.run_id,
            config_hash: header.config_hash,
            answer,
            per_turn,
            notes,
            tokens: summary.tokens,
            stop_reason: summary.stop_reason,
        },
    })
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log schema version {got} (expected {expected})")]
    SchemaVersionMismatch { expected: u32, got: u32 },
    #[error("corrupt log: {0}")]
    Corrupt(String),
    #[error("runs with no turns cannot be persisted")]
    EmptyRun,
    #[error("log io failure: {0}")]
    Io(String),
}
