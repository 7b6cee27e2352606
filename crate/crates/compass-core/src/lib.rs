//! Dual-loop orchestration engine for long-horizon agent tasks.
//!
//! A tactical main agent runs a ReAct-style inner loop over fresh,
//! synthesized context briefs while a strategic monitor watches the step
//! stream asynchronously and decides between turns whether to continue,
//! reflect, replan, verify, or stop. A context manager compresses history
//! into briefs and an append-only note store carries cross-turn memory.
//! On top of the core loop sit parallel-sampling execution modes,
//! trajectory logging with deterministic replay, grading/judging metrics,
//! and a training-data distillation pipeline.

pub mod context_manager;
pub mod distillation;
pub mod evaluation;
pub mod gateway;
pub mod main_agent;
pub mod meta_thinker;
pub mod model;
pub mod orchestrator;
pub mod runlog;
pub mod tools;

pub use gateway::{BackendSpec, ChatMessage, ChatRequest, ChatResponse, Component, Gateway};
pub use model::{
    ContextBrief, MetaDecision, MetaVerdict, NoteRecord, NoteStore, Query, RunConfig, RunMode,
    RunResult, StaticContext, StepKind, StopReason, TokenReport, Trajectory, TrajectoryStep,
};
pub use orchestrator::{run, run_tts};
pub use tools::{ToolCallRecord, ToolRegistry, ToolResult, ToolSpec};
