use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use hoprag_core::gateway::{Gateway, Script, ScriptEntry, TemplateSet};
use hoprag_core::model::{PipelineTrace, Question};
use hoprag_core::orchestrator::{Engine, PipelineConfig};
use hoprag_core::retrieval::{Bm25Index, Retriever};

const IPHONE_Q: &str = "Who is the CEO of the company owns the brand that produces iPhones?";

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn hoprag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hoprag"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ingest(corpus: &str, out: &Path) {
    let o = hoprag(&["ingest", s(&fixture(corpus)), "--out-dir", s(out)]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn local_id(index: &Bm25Index, query: &str, doc_id: &str) -> u32 {
    index
        .retrieve(query, 10)
        .unwrap()
        .into_iter()
        .find(|p| p.doc_id == doc_id)
        .unwrap()
        .local_id
}

/// Two-hop scripted run for the iPhone question; local ids come from the
/// index the CLI built.
fn golden_script(index: &Bm25Index) -> Script {
    let sub1 = "What is the company owns the brand that produces iPhones?";
    let sub2 = "Who is the CEO of Apple Inc.?";
    let apple = local_id(index, sub1, "apple-1");
    let cook = local_id(index, sub2, "apple-2");
    Script::new(vec![
        e(
            "answer",
            "Reasoning: Nothing relevant.\nOutput: I don't know.",
        ),
        e(
            "decompose",
            format!(
                "Reasoning: The company comes first.\nOutput:\n1. {sub1}\n2. Who is the CEO of #1?"
            ),
        ),
        e("decide", "Analysis: Needs a lookup.\nOutput: true"),
        e(
            "rerank",
            format!("Reasoning: Best first.\nOutput: [{apple}]"),
        ),
        e(
            "answer",
            format!("Reasoning: Stated.\nOutput: Apple Inc. [{apple}]"),
        ),
        e("verify", "Reason: Supported.\nOutput: true"),
        e("construct", format!("Rewritten Question: {sub2}")),
        e("decide", "Analysis: Needs a lookup.\nOutput: true"),
        e(
            "rerank",
            format!("Reasoning: Best first.\nOutput: [{cook}]"),
        ),
        e(
            "answer",
            format!("Reasoning: Stated.\nOutput: Tim Cook is the CEO of Apple Inc. [{cook}]"),
        ),
        e("verify", "Reason: Supported.\nOutput: true"),
        e("finalize", "Reasoning: Combine.\nAnswer: Tim Cook"),
        e("final_verify", "Reason: Supported.\nOutput: true"),
    ])
}

fn e(module: &str, response: impl Into<String>) -> ScriptEntry {
    ScriptEntry::new(module, response)
}

fn write_script(dir: &Path, script: &Script) -> PathBuf {
    let path = dir.join("script.json");
    std::fs::write(&path, serde_json::to_string_pretty(script).unwrap()).unwrap();
    path
}

#[test]
fn ingest_prints_chunk_count() {
    let dir = tempfile::tempdir().unwrap();
    let o = hoprag(&[
        "ingest",
        s(&fixture("corpus.jsonl")),
        "--out-dir",
        s(dir.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "3");
    assert!(dir.path().join("index.json").exists());
}

#[test]
fn ingest_missing_file_fails_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let o = hoprag(&[
        "ingest",
        s(&dir.path().join("absent.jsonl")),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("absent.jsonl"), "{}", stderr(&o));
}

#[test]
fn ingest_malformed_line_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = hoprag(&[
        "ingest",
        s(&fixture("malformed_corpus.jsonl")),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn ask_reproduces_golden_answer_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    ingest("iphone_corpus.jsonl", &out);
    let index = Bm25Index::load(&out.join("index.json")).unwrap();
    let script = golden_script(&index);
    let script_path = write_script(dir.path(), &script);

    let o = hoprag(&[
        "ask",
        IPHONE_Q,
        "--id",
        "iphone-ceo",
        "--config",
        s(&fixture("config.toml")),
        "--script",
        s(&script_path),
        "--out-dir",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("route: simple_escalated"), "{text}");
    assert!(text.contains("answer: Tim Cook\n"), "{text}");
    assert!(text.contains("-> Apple Inc."), "{text}");

    let written = std::fs::read_to_string(out.join("traces/iphone-ceo.json")).unwrap();
    let cfg = PipelineConfig::load(&fixture("config.toml")).unwrap();
    let engine = Engine::new(
        cfg,
        Arc::new(Gateway::with_script(script)),
        Arc::new(index),
        Arc::new(TemplateSet::builtin()),
    )
    .unwrap();
    let expected = engine.solve(&Question::new("iphone-ceo", IPHONE_Q).unwrap());
    assert_eq!(written, expected.to_json());

    let schema_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/schema/trace.v1.json");
    let schema: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(schema_path).unwrap()).unwrap();
    let value: serde_json::Value = serde_json::from_str(&written).unwrap();
    assert!(jsonschema::validator_for(&schema).unwrap().is_valid(&value));

    let runs: Vec<_> = std::fs::read_dir(out.join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);
}

#[test]
fn max_reflections_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    ingest("iphone_corpus.jsonl", &out);
    let script = Script::new(vec![
        e("answer", "Reasoning: -\nOutput: I don't know.").repeating(),
        e("decompose", "Reasoning: -\nOutput: None").repeating(),
        e("decide", "Analysis: -\nOutput: true").repeating(),
        e("rerank", "Reasoning: -\nOutput: [1]").repeating(),
        e("rewrite", "New Query: iPhone maker").repeating(),
        e(
            "improve_analysis",
            "Analysis: The previous decomposition is appropriate.",
        )
        .repeating(),
        e("finalize", "Reasoning: -\nAnswer: I don't know.").repeating(),
    ]);
    let script_path = write_script(dir.path(), &script);
    let config = fixture("config.toml");
    let run = |extra: &[&str]| -> PipelineTrace {
        let mut args = vec![
            "ask",
            IPHONE_Q,
            "--config",
            s(&config),
            "--script",
            s(&script_path),
            "--out-dir",
            s(&out),
        ];
        args.extend_from_slice(extra);
        let o = hoprag(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        serde_json::from_str(&std::fs::read_to_string(out.join("traces/ask.json")).unwrap())
            .unwrap()
    };
    assert_eq!(run(&[]).attempts.len(), 4);
    assert_eq!(run(&["--max-reflections", "0"]).attempts.len(), 1);
}

#[test]
fn invalid_config_exits_before_any_backend_call() {
    let dir = tempfile::tempdir().unwrap();
    let o = hoprag(&[
        "ask",
        "Anything?",
        "--config",
        s(&fixture("bad_config.toml")),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("QR requires AV"), "{}", stderr(&o));
    assert!(!dir.path().join("traces").exists());
}

#[test]
fn scripted_backend_without_script_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = hoprag(&["ask", "Anything?", "--out-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--script"), "{}", stderr(&o));
}

#[test]
fn failing_backend_exits_with_backend_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    ingest("iphone_corpus.jsonl", &out);
    let script_path = write_script(dir.path(), &Script::default());
    let o = hoprag(&[
        "ask",
        IPHONE_Q,
        "--script",
        s(&script_path),
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(out.join("traces/ask.json").exists());
}

fn run_eval(cmd: &str, config: &str, out: &Path) -> Output {
    hoprag(&[
        cmd,
        s(&fixture("dataset.jsonl")),
        "--config",
        s(&fixture(config)),
        "--script",
        s(&fixture("capitals_script.json")),
        "--out-dir",
        s(out),
        "--parallel",
        "2",
    ])
}

#[test]
fn ablate_writes_one_row_per_config_and_reuses_judgments() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    ingest("capitals_corpus.jsonl", &out);

    let first = run_eval("ablate", "matrix.toml", &out);
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(
        !stdout(&first).contains("judge calls this run: 0"),
        "{}",
        stdout(&first)
    );
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "{csv}");
    assert!(lines[0].starts_with("config,QD,QC,QR,PR,AV"));
    assert!(lines[1].starts_with("full,1,1,1,1,1"));
    assert!(lines[2].starts_with("no-pr,1,1,1,0,1"));
    assert_eq!(
        std::fs::read_dir(out.join("traces/full")).unwrap().count(),
        4
    );

    let second = run_eval("ablate", "matrix.toml", &out);
    assert!(second.status.success(), "{}", stderr(&second));
    assert!(
        stdout(&second).contains("judge calls this run: 0"),
        "{}",
        stdout(&second)
    );
    assert_eq!(
        std::fs::read_to_string(out.join("ablation.csv")).unwrap(),
        csv
    );

    let report = hoprag(&["report", "--out-dir", s(&out), "--format", "csv"]);
    assert!(report.status.success());
    assert_eq!(stdout(&report), csv);
    assert_eq!(std::fs::read_dir(out.join("runs")).unwrap().count(), 2);
}

#[test]
fn eval_reports_metrics_for_one_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    ingest("capitals_corpus.jsonl", &out);
    let o = run_eval("eval", "config.toml", &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "full");
    assert_eq!(row[8], "0.7500");
    assert_eq!(row[9], "0.7500");
    let table = hoprag(&["report", "--out-dir", s(&out)]);
    assert!(stdout(&table).contains("full"));
}

#[test]
fn dataset_without_answers_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = hoprag(&[
        "eval",
        s(&fixture("dataset_missing_answers.jsonl")),
        "--config",
        s(&fixture("config.toml")),
        "--script",
        s(&fixture("capitals_script.json")),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn manifest_holds_no_secrets() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    ingest("iphone_corpus.jsonl", &out);
    let config = dir.path().join("http.toml");
    std::fs::write(
        &config,
        "[model]\nbackend = \"http\"\nmodel_name = \"m\"\nendpoint = \"http://127.0.0.1:9\"\napi_key_env = \"HOPRAG_TEST_KEY\"\ntimeout_secs = 0.5\n",
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_hoprag"))
        .args([
            "ask",
            "Who makes the iPhone?",
            "--config",
            s(&config),
            "--out-dir",
            s(&out),
            "--max-reflections",
            "0",
        ])
        .env("HOPRAG_TEST_KEY", "sk-very-secret-value")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    for entry in walk(&out) {
        let body = std::fs::read_to_string(&entry).unwrap_or_default();
        assert!(
            !body.contains("sk-very-secret-value"),
            "{}",
            entry.display()
        );
    }
    assert!(!stdout(&o).contains("sk-very-secret-value"));
    assert!(!stderr(&o).contains("sk-very-secret-value"));
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}
