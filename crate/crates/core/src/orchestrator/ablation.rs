use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::batch::{run_batch, DataError, TraceSink};
use super::config::{AblationMatrix, ConfigError, ModuleFlags, PipelineConfig};
use super::pipeline::Engine;
use crate::evaluation::{aggregate, judge, Judgment, JudgmentCache, MetricError, MetricsRow};
use crate::gateway::{Gateway, TemplateSet};
use crate::model::{PipelineTrace, Question};
use crate::modules::ModuleKind;
use crate::retrieval::{RetrievalError, Retriever};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("writing results: {0}")]
    Io(#[from] std::io::Error),
}

/// Shared resources for building engines from configurations.
pub struct RunEnv {
    pub gateway: Arc<Gateway>,
    pub templates: Arc<TemplateSet>,
    /// Used for every configuration when set; otherwise each configuration
    /// opens the retriever its `retrieval` section describes.
    pub retriever: Option<Arc<dyn Retriever>>,
}

impl RunEnv {
    pub fn engine(&self, cfg: &PipelineConfig) -> Result<Engine, RunError> {
        let retriever = match &self.retriever {
            Some(r) => Arc::clone(r),
            None => Arc::from(cfg.retrieval.open()?),
        };
        Ok(Engine::new(
            cfg.clone(),
            Arc::clone(&self.gateway),
            retriever,
            Arc::clone(&self.templates),
        )?)
    }
}

/// Everything produced by evaluating one configuration.
#[derive(Debug, Clone)]
pub struct ConfigRun {
    pub config: PipelineConfig,
    pub traces: Vec<PipelineTrace>,
    pub judgments: Vec<Judgment>,
    pub metrics: MetricsRow,
    pub judge_calls: usize,
}

/// Solves the dataset under `cfg`, judges the answers, and aggregates.
/// Traces are written to `trace_dir` when given.
pub fn evaluate_config(
    env: &RunEnv,
    cfg: &PipelineConfig,
    questions: &[Question],
    parallel: usize,
    cache: &mut JudgmentCache,
    trace_dir: Option<&Path>,
) -> Result<ConfigRun, RunError> {
    let engine = env.engine(cfg)?;
    let sink = trace_dir.map(TraceSink::create).transpose()?;
    let traces = run_batch(&engine, questions, parallel, sink.as_ref())?;
    let judge_model = cfg.models().spec_for(ModuleKind::Evaluate).clone();
    let outcome = judge(&env.gateway, &env.templates, &judge_model, &traces, cache)?;
    let metrics = aggregate(&traces, &outcome.judgments, &cfg.label)?;
    Ok(ConfigRun {
        config: cfg.clone(),
        traces,
        judgments: outcome.judgments,
        metrics,
        judge_calls: outcome.judge_calls,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub flags: ModuleFlags,
    pub metrics: MetricsRow,
    /// Differences from the baseline row (this row minus baseline).
    pub delta_cover_em: f64,
    pub delta_llm_eval: f64,
    pub delta_avg: f64,
    pub module_models: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub baseline: String,
    pub rows: Vec<AblationRow>,
    pub judge_calls: usize,
}

/// Evaluates every configuration of the matrix on the same questions.
/// Traces go to `<out_dir>/traces/<label>/` when `out_dir` is given.
pub fn run_ablation(
    env: &RunEnv,
    questions: &[Question],
    matrix: &AblationMatrix,
    parallel: usize,
    cache: &mut JudgmentCache,
    out_dir: Option<&Path>,
) -> Result<(AblationReport, Vec<ConfigRun>), RunError> {
    if questions.is_empty() {
        return Err(DataError::Empty.into());
    }
    let mut runs = Vec::with_capacity(matrix.configs.len());
    for cfg in &matrix.configs {
        let dir = out_dir.map(|d| d.join("traces").join(&cfg.label));
        runs.push(evaluate_config(
            env,
            cfg,
            questions,
            parallel,
            cache,
            dir.as_deref(),
        )?);
    }
    let report = build_report(&matrix.baseline, &runs);
    Ok((report, runs))
}

pub fn build_report(baseline: &str, runs: &[ConfigRun]) -> AblationReport {
    let base = runs
        .iter()
        .find(|r| r.config.label == baseline)
        .or(runs.first())
        .map(|r| r.metrics.clone());
    let rows = runs
        .iter()
        .map(|r| {
            let m = &r.metrics;
            let (bc, bl, ba) = base
                .as_ref()
                .map(|b| (b.cover_em, b.llm_eval, b.avg))
                .unwrap_or((m.cover_em, m.llm_eval, m.avg));
            let models = r.config.models();
            AblationRow {
                flags: r.config.enable,
                metrics: m.clone(),
                delta_cover_em: m.cover_em - bc,
                delta_llm_eval: m.llm_eval - bl,
                delta_avg: m.avg - ba,
                module_models: ModuleKind::ALL
                    .iter()
                    .map(|k| {
                        (
                            k.as_str().to_string(),
                            models.spec_for(*k).model_name.clone(),
                        )
                    })
                    .collect(),
            }
        })
        .collect();
    AblationReport {
        baseline: baseline.to_string(),
        rows,
        judge_calls: runs.iter().map(|r| r.judge_calls).sum(),
    }
}

pub const CSV_HEADER: [&str; 15] = [
    "config",
    "QD",
    "QC",
    "QR",
    "PR",
    "AV",
    "RD",
    "simple_qa",
    "cover_em",
    "llm_eval",
    "avg",
    "delta_avg",
    "avg_tokens",
    "avg_wall_time",
    "n",
];

fn flag_cells(f: &ModuleFlags) -> [bool; 7] {
    [f.qd, f.qc, f.qr, f.pr, f.av, f.rd, f.simple_qa]
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for row in &self.rows {
            let m = &row.metrics;
            let mut record = vec![m.config_label.clone()];
            record.extend(
                flag_cells(&row.flags)
                    .iter()
                    .map(|&b| u8::from(b).to_string()),
            );
            record.extend([
                format!("{:.4}", m.cover_em),
                format!("{:.4}", m.llm_eval),
                format!("{:.4}", m.avg),
                format!("{:+.4}", row.delta_avg),
                format!("{:.1}", m.avg_tokens),
                format!("{:.3}", m.avg_wall_time),
                m.n.to_string(),
            ]);
            w.write_record(&record).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    /// Fixed-width table: module flags, then the two metrics, their mean and
    /// the change from the baseline.
    pub fn to_table(&self) -> String {
        let label_width = self
            .rows
            .iter()
            .map(|r| r.metrics.config_label.chars().count())
            .chain([6])
            .max()
            .unwrap_or(6);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<label_width$}  QD QC QR PR AV RD SQ  Cover-EM  LLM-Eval     Avg    dAvg  Tokens     n",
            "config"
        );
        for row in &self.rows {
            let m = &row.metrics;
            let flags: Vec<&str> = flag_cells(&row.flags)
                .iter()
                .map(|&b| if b { " Y" } else { " -" })
                .collect();
            let marker = if m.config_label == self.baseline {
                " *"
            } else {
                ""
            };
            let _ = writeln!(
                out,
                "{:<label_width$} {}  {:>8.3}  {:>8.3}  {:>6.3}  {:>+6.3}  {:>6.0}  {:>4}{marker}",
                m.config_label,
                flags.join(" "),
                m.cover_em,
                m.llm_eval,
                m.avg,
                row.delta_avg,
                m.avg_tokens,
                m.n,
            );
        }
        let _ = writeln!(
            out,
            "* baseline; judge calls this run: {}",
            self.judge_calls
        );
        out
    }
}
