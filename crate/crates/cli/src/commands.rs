use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use hoprag_core::evaluation::JudgmentCache;
use hoprag_core::model::{PipelineTrace, StepTrace};
use hoprag_core::orchestrator::{
    build_report, evaluate_config, read_dataset, run_ablation, AblationReport, ConfigRun, Engine,
    TraceSink,
};
use hoprag_core::retrieval;
use tracing::{info, warn};

use crate::error::CliError;
use crate::manifest::RunManifest;
use crate::settings;
use crate::{Common, ReportFormat};

const REPORT_FILE: &str = "report.json";
const JUDGMENT_CACHE: &str = "judgments.jsonl";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, body: &str) -> Result<(), CliError> {
    fs::write(path, body).map_err(|e| CliError::io(path, e))
}

pub fn ingest(corpus: &Path, index: Option<PathBuf>, out_dir: &Path) -> Result<(), CliError> {
    let index = index.unwrap_or_else(|| settings::default_index(out_dir));
    if let Some(parent) = index.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let (_, count) = retrieval::ingest(corpus, &index)?;
    println!("{count}");
    info!(index = %index.display(), "indexed {count} chunks");
    Ok(())
}

pub fn ask(question: &str, id: &str, common: &Common) -> Result<(), CliError> {
    let cfg = settings::pipeline_config(common)?;
    let q = hoprag_core::model::Question::new(id, question)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let (env, template_digest) = settings::env(common, &[&cfg])?;
    let mut manifest = RunManifest::start("ask", &template_digest);
    manifest.config_path = common.config.clone();
    manifest
        .config_digests
        .insert(cfg.label.clone(), cfg.digest());

    let retriever = Arc::from(cfg.retrieval.open()?);
    let engine = Engine::new(cfg, env.gateway, retriever, env.templates)?;
    let trace = engine.solve(&q);

    let sink = TraceSink::create(&common.out_dir.join("traces"))
        .map_err(|e| CliError::io(&common.out_dir, e))?;
    let path = sink
        .write(&trace)
        .map_err(|e| CliError::io(&common.out_dir, e))?;
    manifest.finish(&common.out_dir)?;

    print!("{}", summarize(&trace));
    println!("trace: {}", path.display());

    let errors = all_errors(&trace);
    if errors.is_empty() {
        Ok(())
    } else {
        Err(CliError::Backend(format!(
            "{} module call(s) failed: {}",
            errors.len(),
            errors.join("; ")
        )))
    }
}

fn all_errors(trace: &PipelineTrace) -> Vec<String> {
    trace
        .errors
        .iter()
        .chain(trace.attempts.iter().flat_map(|a| &a.errors))
        .cloned()
        .collect()
}

fn step_line(out: &mut String, indent: &str, label: &str, step: &StepTrace) {
    let verdict = if step.step_verdict.accepted {
        "accepted"
    } else {
        "rejected"
    };
    let query = step.record.sub_question.text();
    let _ = writeln!(
        out,
        "{indent}{label} {query}\n{indent}    -> {} ({verdict}: {})",
        step.record.answer.text, step.step_verdict.reason
    );
}

/// Human-readable digest of a trace: route, every step, and the final answer.
pub fn summarize(trace: &PipelineTrace) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "question: {}", trace.question.text);
    let _ = writeln!(out, "route: {}", trace.route);
    if let Some(simple) = &trace.simple_path {
        step_line(&mut out, "", "simple:", simple);
    }
    for (k, attempt) in trace.attempts.iter().enumerate() {
        let _ = writeln!(
            out,
            "attempt {} (plan generation {}, {} step(s))",
            k + 1,
            attempt.plan.generation,
            attempt.steps.len()
        );
        if let Some(analysis) = &attempt.reflection_analysis {
            let _ = writeln!(out, "  reflection: {}", analysis.replace('\n', " "));
        }
        for step in &attempt.steps {
            step_line(&mut out, "  ", &format!("{}.", step.step_index), step);
        }
        let verdict = if attempt.verdict.accepted {
            "accepted"
        } else {
            "rejected"
        };
        let _ = writeln!(out, "  final: {} ({verdict})", attempt.final_answer.text);
    }
    let _ = writeln!(out, "answer: {}", trace.final_answer.text);
    let _ = writeln!(
        out,
        "verified: {}  tokens: {}{}  calls: {}",
        if trace.verified { "yes" } else { "no" },
        trace.token_usage,
        if trace.approximate_tokens {
            " (approx.)"
        } else {
            ""
        },
        trace.calls.len()
    );
    out
}

fn open_cache(out_dir: &Path) -> Result<JudgmentCache, CliError> {
    create_dir(out_dir)?;
    Ok(JudgmentCache::open(&out_dir.join(JUDGMENT_CACHE))?)
}

fn log_failures(runs: &[ConfigRun]) {
    for run in runs {
        for trace in &run.traces {
            let errors = all_errors(trace);
            if !errors.is_empty() {
                warn!(config = %run.config.label, question = %trace.question.id, "{}", errors.join("; "));
            }
        }
        for j in run.judgments.iter().filter(|j| j.error.is_some()) {
            warn!(config = %run.config.label, question = %j.question_id, "judge failed: {}", j.error.as_deref().unwrap_or(""));
        }
    }
}

fn write_report(out_dir: &Path, csv_name: &str, report: &AblationReport) -> Result<(), CliError> {
    write_file(&out_dir.join(csv_name), &report.to_csv())?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write_file(&out_dir.join(REPORT_FILE), &json)?;
    print!("{}", report.to_table());
    Ok(())
}

pub fn eval(dataset: &Path, common: &Common) -> Result<(), CliError> {
    let cfg = settings::pipeline_config(common)?;
    let questions = read_dataset(dataset)?;
    let (env, template_digest) = settings::env(common, &[&cfg])?;
    let mut manifest = RunManifest::start("eval", &template_digest);
    manifest.config_path = common.config.clone();
    manifest.dataset_path = Some(dataset.to_path_buf());
    manifest
        .config_digests
        .insert(cfg.label.clone(), cfg.digest());

    let mut cache = open_cache(&common.out_dir)?;
    let trace_dir = common.out_dir.join("traces").join(&cfg.label);
    let run = evaluate_config(
        &env,
        &cfg,
        &questions,
        common.parallel,
        &mut cache,
        Some(&trace_dir),
    )?;
    let runs = [run];
    log_failures(&runs);
    let report = build_report(&cfg.label, &runs);
    manifest.finish(&common.out_dir)?;
    write_report(&common.out_dir, "metrics.csv", &report)
}

pub fn ablate(dataset: &Path, common: &Common) -> Result<(), CliError> {
    let matrix = settings::matrix(common)?;
    let questions = read_dataset(dataset)?;
    let configs: Vec<_> = matrix.configs.iter().collect();
    let (env, template_digest) = settings::env(common, &configs)?;
    let mut manifest = RunManifest::start("ablate", &template_digest);
    manifest.config_path = common.config.clone();
    manifest.dataset_path = Some(dataset.to_path_buf());
    for cfg in &matrix.configs {
        manifest
            .config_digests
            .insert(cfg.label.clone(), cfg.digest());
    }

    let mut cache = open_cache(&common.out_dir)?;
    let (report, runs) = run_ablation(
        &env,
        &questions,
        &matrix,
        common.parallel,
        &mut cache,
        Some(&common.out_dir),
    )?;
    log_failures(&runs);
    manifest.finish(&common.out_dir)?;
    write_report(&common.out_dir, "ablation.csv", &report)
}

pub fn report(out_dir: &Path, format: ReportFormat) -> Result<(), CliError> {
    let path = out_dir.join(REPORT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let report: AblationReport = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    match format {
        ReportFormat::Table => print!("{}", report.to_table()),
        ReportFormat::Csv => print!("{}", report.to_csv()),
        ReportFormat::Json => println!("{text}"),
    }
    Ok(())
}
