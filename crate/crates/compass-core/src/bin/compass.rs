//! `compass`: run, replay, evaluate, and distill dual-loop agent runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use compass_core::distillation::{
    build_preference_pairs, candidates_from_runs, emit_datasets, mine_sft_examples, MinedRun,
    PairConfig, PreferencePair, SftFilters,
};
use compass_core::evaluation::{self, answers_match};
use compass_core::gateway::{BackendSpec, Gateway};
use compass_core::model::{Query, RunConfig, RunMode};
use compass_core::orchestrator::{self, RunPaths};
use compass_core::runlog::{persist_run, replay_run, ReplayedRun};
use compass_core::tools::{mock_registry, MockCorpus, ToolRegistry};

#[derive(Parser)]
#[command(
    name = "compass",
    about = "Dual-loop agent orchestration engine",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Single,
    #[value(name = "full-ps")]
    FullPs,
    #[value(name = "mt-ps")]
    MtPs,
    #[value(name = "cm-ps")]
    CmPs,
}

impl From<ModeArg> for RunMode {
    fn from(mode: ModeArg) -> Self {
        match mode {
            ModeArg::Single => RunMode::Single,
            ModeArg::FullPs => RunMode::FullPs,
            ModeArg::MtPs => RunMode::MtPs,
            ModeArg::CmPs => RunMode::CmPs,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Execute a query through the dual-loop engine.
    Run {
        /// Task text, or @path to read it from a file.
        #[arg(long)]
        query: String,
        /// JSON config file mirroring the run-config fields.
        #[arg(long)]
        config: PathBuf,
        /// Execution mode override.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Parallel sample count override.
        #[arg(long, value_name = "K")]
        n: Option<usize>,
        /// Backend: remote:<url> or scripted:<path>. Falls back to the
        /// COMPASS_BACKEND environment variable.
        #[arg(long)]
        backend: Option<String>,
        /// Trajectory log output (JSON-Lines); notes are saved alongside.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Sampling seed override.
        #[arg(long, value_name = "S")]
        seed: Option<u64>,
    },
    /// Reconstruct and summarize a persisted run log.
    Replay {
        #[arg(long)]
        log: PathBuf,
    },
    /// Mine run logs into SFT records and preference pairs.
    Distill {
        /// Directory of run logs (*.jsonl).
        #[arg(long)]
        logs: PathBuf,
        /// Output directory for sft.jsonl and pairs.jsonl.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        min_tools: usize,
        #[arg(long, default_value_t = 25)]
        max_tools: usize,
        /// Labels file (JSON: question id → gold answer) for
        /// correctness-aware filtering.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Grade and judge run logs against a labels file.
    Eval {
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Judge backend: remote:<url> or scripted:<path>.
        #[arg(long)]
        judge: String,
        /// Optional JSON report output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

#[derive(Debug)]
enum CliError {
    Backend(String),
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Backend(_) => ExitCode::from(2),
            CliError::Other(_) => ExitCode::from(1),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Backend(msg) | CliError::Other(msg) => write!(f, "{msg}"),
        }
    }
}

fn other(err: impl std::fmt::Display) -> CliError {
    CliError::Other(err.to_string())
}

fn dispatch(command: Command) -> Result<ExitCode, CliError> {
    match command {
        Command::Run {
            query,
            config,
            mode,
            n,
            backend,
            log,
            seed,
        } => cmd_run(query, config, mode, n, backend, log, seed),
        Command::Replay { log } => cmd_replay(log),
        Command::Distill {
            logs,
            out,
            min_tools,
            max_tools,
            labels,
        } => cmd_distill(logs, out, min_tools, max_tools, labels),
        Command::Eval {
            logs,
            labels,
            judge,
            out,
        } => cmd_eval(logs, labels, judge, out),
    }
}

fn load_query(raw: &str) -> Result<Query, CliError> {
    let text = match raw.strip_prefix('@') {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| other(format!("query file {path:?}: {e}")))?
            .trim()
            .to_string(),
        None => raw.to_string(),
    };
    // a short stable id derived from the text keeps logs joinable
    let id = format!(
        "cli-{}",
        &compass_core::gateway::request_hash(&compass_core::gateway::ChatRequest::new(vec![
            compass_core::gateway::ChatMessage::user(text.clone(),)
        ]),)[..8]
    );
    Query::new(id, text).map_err(other)
}

fn build_registry() -> ToolRegistry {
    let corpus = match std::env::var("COMPASS_TOOL_CORPUS") {
        Ok(path) => MockCorpus::from_path(Path::new(&path)).unwrap_or_else(|e| {
            eprintln!("warning: {e}; falling back to an empty corpus");
            MockCorpus::default()
        }),
        Err(_) => MockCorpus::default(),
    };
    mock_registry(corpus)
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    query: String,
    config_path: PathBuf,
    mode: Option<ModeArg>,
    n: Option<usize>,
    backend: Option<String>,
    log: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<ExitCode, CliError> {
    let query = load_query(&query)?;
    let body = std::fs::read_to_string(&config_path)
        .map_err(|e| other(format!("config {config_path:?}: {e}")))?;
    let mut config = RunConfig::from_json(&body).map_err(other)?;
    if let Some(mode) = mode {
        config.mode = mode.into();
    }
    if let Some(n) = n {
        config.n_samples = n;
    }
    if let Some(seed) = seed {
        config.sampling.seed = Some(seed);
    }
    config.validate().map_err(other)?;

    let backend = backend
        .or_else(|| std::env::var("COMPASS_BACKEND").ok())
        .ok_or_else(|| {
            CliError::Backend("no backend: pass --backend or set COMPASS_BACKEND".into())
        })?;
    let spec = BackendSpec::parse(&backend).map_err(|e| CliError::Backend(e.to_string()))?;
    let gateway = Gateway::from_spec(&spec).map_err(|e| CliError::Backend(e.to_string()))?;
    let registry = build_registry();

    let paths = RunPaths {
        notes: log.as_ref().map(|p| p.with_extension("notes.json")),
    };
    let outcome = match config.mode {
        RunMode::Single => {
            orchestrator::run_with_paths(&query, &config, &gateway, &registry, &paths)
        }
        _ => orchestrator::run_tts(&query, &config, &gateway, &registry),
    };
    let result = outcome.map_err(|e| {
        if e.is_backend_failure() {
            CliError::Backend(e.to_string())
        } else {
            CliError::Other(e.to_string())
        }
    })?;

    if let Some(log_path) = &log {
        persist_run(&result, &query, log_path).map_err(other)?;
        eprintln!("log written to {}", log_path.display());
    }
    println!("{}", result.answer);
    eprintln!(
        "run {} | turns {} | stop {:?} | tokens {}",
        result.run_id,
        result.per_turn.len(),
        result.stop_reason,
        result.tokens.total
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_replay(log: PathBuf) -> Result<ExitCode, CliError> {
    let ReplayedRun { query, result } = replay_run(&log).map_err(other)?;
    println!("run id      : {}", result.run_id);
    println!("query       : {}", query.text);
    println!("turns       : {}", result.per_turn.len());
    println!("stop reason : {:?}", result.stop_reason);
    println!("tokens      : {}", result.tokens.total);
    for (i, turn) in result.per_turn.iter().enumerate() {
        println!(
            "turn {i}: {} steps, verdict {}",
            turn.trajectory.len(),
            turn.decision.verdict.as_str()
        );
    }
    println!("answer      : {}", result.answer);
    Ok(ExitCode::SUCCESS)
}

fn load_runs(dir: &Path) -> Result<Vec<ReplayedRun>, CliError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| other(format!("logs dir {dir:?}: {e}")))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "jsonl"))
        .collect();
    paths.sort();
    let mut runs = Vec::new();
    for path in paths {
        match replay_run(&path) {
            Ok(run) => runs.push(run),
            Err(e) => eprintln!("warning: skipping {}: {e}", path.display()),
        }
    }
    Ok(runs)
}

fn cmd_distill(
    logs: PathBuf,
    out: PathBuf,
    min_tools: usize,
    max_tools: usize,
    labels: Option<PathBuf>,
) -> Result<ExitCode, CliError> {
    let labels: Option<BTreeMap<String, String>> = match labels {
        Some(path) => Some(evaluation::load_labels(&path).map_err(other)?),
        None => None,
    };
    let runs: Vec<MinedRun> = load_runs(&logs)?
        .into_iter()
        .map(|ReplayedRun { query, result }| {
            let success = labels
                .as_ref()
                .and_then(|map| map.get(&query.id))
                .map(|gold| answers_match(&result.answer, gold));
            MinedRun {
                query,
                result,
                success,
            }
        })
        .collect();
    if runs.is_empty() {
        return Err(other(format!(
            "no replayable logs under {}",
            logs.display()
        )));
    }

    let filters = SftFilters {
        min_tools,
        max_tools,
    };
    let output = mine_sft_examples(&runs, &filters);

    let mut pairs: Vec<(String, PreferencePair)> = Vec::new();
    for (query_id, candidates) in candidates_from_runs(&runs) {
        for pair in build_preference_pairs(&candidates, &PairConfig::default()) {
            pairs.push((query_id.clone(), pair));
        }
    }

    std::fs::create_dir_all(&out).map_err(|e| other(format!("out dir {out:?}: {e}")))?;
    let counts = emit_datasets(
        &output.records,
        &pairs,
        &out.join("sft.jsonl"),
        &out.join("pairs.jsonl"),
    )
    .map_err(other)?;
    println!(
        "runs {} (kept {}, outside tool window {}, degenerate {})",
        output.report.total_runs,
        output.report.kept_runs,
        output.report.dropped_tool_window,
        output.report.dropped_degenerate
    );
    println!(
        "categories: direct {} / recovery {} / verification {}",
        output.report.direct_success,
        output.report.recovery_sequences,
        output.report.verification_patterns
    );
    println!(
        "strata: simple {} / multi-source {} / complex {}",
        output.report.strata.simple,
        output.report.strata.multi_source,
        output.report.strata.complex
    );
    println!(
        "sft records {} | preference pairs {}",
        counts.sft_records, counts.preference_pairs
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(
    logs: PathBuf,
    labels: PathBuf,
    judge: String,
    out: Option<PathBuf>,
) -> Result<ExitCode, CliError> {
    let labels = evaluation::load_labels(&labels).map_err(other)?;
    let spec = BackendSpec::parse(&judge).map_err(|e| CliError::Backend(e.to_string()))?;
    let judge = Gateway::from_spec(&spec).map_err(|e| CliError::Backend(e.to_string()))?;
    let runs: Vec<(Query, compass_core::RunResult)> = load_runs(&logs)?
        .into_iter()
        .map(|ReplayedRun { query, result }| (query, result))
        .collect();
    let report = evaluation::evaluate_runs(&runs, &labels, &judge).map_err(|e| match e {
        evaluation::EvalError::Gateway(g) => CliError::Backend(g.to_string()),
        other_err => other(other_err),
    })?;
    print!("{}", report.render_table());
    if let Some(path) = out {
        std::fs::write(&path, report.to_json()).map_err(other)?;
        eprintln!("report written to {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}
