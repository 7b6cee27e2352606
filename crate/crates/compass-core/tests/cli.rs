//! End-to-end checks of the `compass` binary: run, replay, eval, and
//! distill over the bundled demo fixtures.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn compass() -> Command {
    Command::new(env!("CARGO_BIN_EXE_compass"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).to_string()
}

fn run_demo(log_path: &Path) -> Output {
    compass()
        .args([
            "run",
            "--query",
            "Which 1990-1994 match had a Brazilian referee, four yellow cards with three after half-time, and an injury substitution inside 25 minutes?",
            "--config",
            fixture("demo_config.json").to_str().unwrap(),
            "--backend",
            &format!("scripted:{}", fixture("demo_fixture.json").display()),
            "--log",
            log_path.to_str().unwrap(),
        ])
        .env("COMPASS_TOOL_CORPUS", fixture("demo_corpus.json"))
        .output()
        .expect("binary runs")
}

#[test]
fn run_replay_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let log_path = dir.path().join("demo.jsonl");

    let output = run_demo(&log_path);
    assert_eq!(
        output.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert_eq!(stdout(&output).trim(), "Ireland v Romania");
    assert!(log_path.exists());
    assert!(
        log_path.with_extension("notes.json").exists(),
        "notes persisted next to the log"
    );

    let replayed = compass()
        .args(["replay", "--log", log_path.to_str().unwrap()])
        .output()
        .expect("binary runs");
    assert_eq!(replayed.status.code(), Some(0));
    let text = stdout(&replayed);
    assert!(text.contains("Ireland v Romania"));
    assert!(text.contains("turns       : 1"));
}

#[test]
fn query_from_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let query_file = dir.path().join("q.txt");
    std::fs::write(&query_file, "Which match was it?\n").unwrap();
    let output = compass()
        .args([
            "run",
            "--query",
            &format!("@{}", query_file.display()),
            "--config",
            fixture("demo_config.json").to_str().unwrap(),
            "--mode",
            "full-ps",
            "--n",
            "1",
            "--seed",
            "11",
            "--backend",
            &format!("scripted:{}", fixture("demo_fixture.json").display()),
        ])
        .env("COMPASS_TOOL_CORPUS", fixture("demo_corpus.json"))
        .output()
        .expect("binary runs");
    assert_eq!(
        output.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert_eq!(stdout(&output).trim(), "Ireland v Romania");
}

#[test]
fn run_without_backend_exits_2() {
    let output = compass()
        .args([
            "run",
            "--query",
            "anything",
            "--config",
            fixture("demo_config.json").to_str().unwrap(),
        ])
        .env_remove("COMPASS_BACKEND")
        .output()
        .expect("binary runs");
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn run_with_unreachable_remote_exits_2() {
    let output = compass()
        .args([
            "run",
            "--query",
            "anything",
            "--config",
            fixture("demo_config.json").to_str().unwrap(),
            "--backend",
            "remote:http://127.0.0.1:9/v1/chat/completions",
        ])
        .output()
        .expect("binary runs");
    assert_eq!(
        output.status.code(),
        Some(2),
        "hard backend failure maps to exit 2"
    );
}

#[test]
fn eval_and_distill_over_logs() {
    let dir = tempfile::tempdir().unwrap();
    let logs = dir.path().join("logs");
    std::fs::create_dir_all(&logs).unwrap();
    let output = run_demo(&logs.join("demo.jsonl"));
    assert_eq!(output.status.code(), Some(0));

    // the demo answer equals gold, so grading needs no judge completions;
    // decision judgments come from the scripted judge fixture
    let log_body = std::fs::read_to_string(logs.join("demo.jsonl")).unwrap();
    let query_id = log_body
        .lines()
        .next()
        .and_then(|line| serde_json::from_str::<serde_json::Value>(line).ok())
        .and_then(|header| header["query_id"].as_str().map(str::to_string))
        .expect("header has a query id");
    let labels = dir.path().join("labels.json");
    std::fs::write(
        &labels,
        format!("{{\"{query_id}\": \"Ireland v Romania\"}}"),
    )
    .unwrap();
    let judge_fixture = dir.path().join("judge.json");
    std::fs::write(
        &judge_fixture,
        r#"{"schema_version":1,"entries":{"judge:*":"reasoning: concluding matched the gold answer\nca_correct: yes"},"overrides":{}}"#,
    )
    .unwrap();

    let report_path = dir.path().join("report.json");
    let output = compass()
        .args([
            "eval",
            "--logs",
            logs.to_str().unwrap(),
            "--labels",
            labels.to_str().unwrap(),
            "--judge",
            &format!("scripted:{}", judge_fixture.display()),
            "--out",
            report_path.to_str().unwrap(),
        ])
        .output()
        .expect("binary runs");
    assert_eq!(
        output.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let table = stdout(&output);
    assert!(table.contains("Pass@1"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["pass_at_1"], 1.0);
    assert_eq!(report["ca"], 1.0);

    let out = dir.path().join("datasets");
    let output = compass()
        .args([
            "distill",
            "--logs",
            logs.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--min-tools",
            "1",
            "--max-tools",
            "25",
        ])
        .output()
        .expect("binary runs");
    assert_eq!(
        output.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert!(out.join("sft.jsonl").exists());
    assert!(out.join("pairs.jsonl").exists());
    assert!(stdout(&output).contains("sft records"));
}
