//! Answer metrics: Cover-EM, the LLM judge adapter, and per-config aggregation.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{Gateway, ModelSpec, TemplateSet};
use crate::model::PipelineTrace;
use crate::modules::{ModelAssignment, Reasoner};

static PUNCTUATION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\p{P}").unwrap());

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("gold answer list is empty")]
    EmptyGold,
    #[error("gold answer {0:?} normalizes to nothing")]
    DegenerateGold(String),
    #[error("no judgment for question '{0}'")]
    MissingJudgment(String),
    #[error("nothing to aggregate")]
    NoQuestions,
    #[error("question '{0}' has no gold answers")]
    MissingGold(String),
    #[error("judgment cache {path}: {reason}")]
    Cache { path: String, reason: String },
}

/// Lowercase, delete every Unicode punctuation character, split on whitespace.
///
/// Deletion happens before splitting, so `"U.S.A."` becomes `["usa"]` and
/// hyphenated words merge.
pub fn normalize(s: &str) -> Vec<String> {
    let lowered = s.to_lowercase();
    PUNCTUATION
        .replace_all(&lowered, "")
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// 1 when some gold answer's tokens occur as a contiguous run in the prediction.
pub fn cover_em(prediction: &str, gold: &[String]) -> Result<u8, MetricError> {
    if gold.is_empty() {
        return Err(MetricError::EmptyGold);
    }
    let pred = normalize(prediction);
    let mut hit = false;
    for g in gold {
        let tokens = normalize(g);
        if tokens.is_empty() {
            return Err(MetricError::DegenerateGold(g.clone()));
        }
        hit |= tokens.len() <= pred.len()
            && pred.windows(tokens.len()).any(|w| w == tokens.as_slice());
    }
    Ok(u8::from(hit))
}

pub fn prediction_hash(prediction: &str) -> String {
    hex::encode(Sha256::digest(prediction.as_bytes()))
}

/// Scores for one question's final answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub question_id: String,
    pub prediction_hash: String,
    pub cover_em: u8,
    pub llm_eval: bool,
    /// Set when the judge call failed; such judgments count as `false` and are not cached.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub config_label: String,
    pub cover_em: f64,
    pub llm_eval: f64,
    /// Mean of the two metrics.
    pub avg: f64,
    pub avg_tokens: f64,
    pub avg_wall_time: f64,
    pub n: usize,
}

/// Means over the dataset. Every trace needs a judgment for its question id
/// whose prediction hash matches the trace's final answer.
pub fn aggregate(
    traces: &[PipelineTrace],
    judgments: &[Judgment],
    config_label: &str,
) -> Result<MetricsRow, MetricError> {
    if traces.is_empty() {
        return Err(MetricError::NoQuestions);
    }
    let by_id: HashMap<(&str, &str), &Judgment> = judgments
        .iter()
        .map(|j| ((j.question_id.as_str(), j.prediction_hash.as_str()), j))
        .collect();
    let (mut cover, mut llm, mut tokens, mut wall) = (0.0, 0.0, 0.0, 0.0);
    for t in traces {
        let hash = prediction_hash(&t.final_answer.text);
        let j = by_id
            .get(&(t.question.id.as_str(), hash.as_str()))
            .ok_or_else(|| MetricError::MissingJudgment(t.question.id.clone()))?;
        cover += f64::from(j.cover_em);
        llm += f64::from(u8::from(j.llm_eval));
        tokens += t.token_usage as f64;
        wall += t.wall_time;
    }
    let n = traces.len() as f64;
    let (cover_em, llm_eval) = (cover / n, llm / n);
    Ok(MetricsRow {
        config_label: config_label.to_string(),
        cover_em,
        llm_eval,
        avg: (cover_em + llm_eval) / 2.0,
        avg_tokens: tokens / n,
        avg_wall_time: wall / n,
        n: traces.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeOutcome {
    /// One judgment per trace, in trace order.
    pub judgments: Vec<Judgment>,
    /// Model calls made; cache hits make none.
    pub judge_calls: usize,
    pub cache_hits: usize,
}

/// Scores every trace's final answer with Cover-EM and the LLM judge,
/// reusing cached judgments. A failed judge call scores `false` and records
/// the error instead of aborting.
pub fn judge(
    gateway: &Gateway,
    templates: &TemplateSet,
    judge_model: &ModelSpec,
    traces: &[PipelineTrace],
    cache: &mut JudgmentCache,
) -> Result<JudgeOutcome, MetricError> {
    let models = ModelAssignment::uniform(judge_model.clone());
    let mut reasoner = Reasoner::new(gateway, templates, &models);
    reasoner.set_phase("judge", 0);
    let mut out = JudgeOutcome {
        judgments: Vec::with_capacity(traces.len()),
        judge_calls: 0,
        cache_hits: 0,
    };
    for t in traces {
        let q = &t.question;
        let prediction = &t.final_answer.text;
        if let Some(j) = cache.get(&q.id, prediction) {
            out.cache_hits += 1;
            out.judgments.push(j.clone());
            continue;
        }
        let gold = q
            .gold_answers
            .as_deref()
            .ok_or_else(|| MetricError::MissingGold(q.id.clone()))?;
        let cover = cover_em(prediction, gold)?;
        let before = reasoner.calls().len();
        let (llm_eval, error) = match reasoner.llm_eval(q, prediction, gold) {
            Ok(b) => (b, None),
            Err(e) => (false, Some(e.to_string())),
        };
        out.judge_calls += reasoner.calls().len() - before;
        let judgment = Judgment {
            question_id: q.id.clone(),
            prediction_hash: prediction_hash(prediction),
            cover_em: cover,
            llm_eval,
            error,
        };
        cache.insert(judgment.clone())?;
        out.judgments.push(judgment);
    }
    Ok(out)
}

/// Judgments persisted as JSONL, keyed by (question id, prediction hash), so
/// re-aggregation never calls the judge twice for the same answer.
#[derive(Debug, Default)]
pub struct JudgmentCache {
    path: Option<PathBuf>,
    entries: HashMap<(String, String), Judgment>,
}

impl JudgmentCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or starts) the sidecar at `path`.
    pub fn open(path: &Path) -> Result<Self, MetricError> {
        let cache_err = |reason: String| MetricError::Cache {
            path: path.display().to_string(),
            reason,
        };
        let mut entries = HashMap::new();
        if path.exists() {
            let f = fs::File::open(path).map_err(|e| cache_err(e.to_string()))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| cache_err(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let j: Judgment =
                    serde_json::from_str(&line).map_err(|e| cache_err(e.to_string()))?;
                entries.insert((j.question_id.clone(), j.prediction_hash.clone()), j);
            }
        }
        Ok(JudgmentCache {
            path: Some(path.to_path_buf()),
            entries,
        })
    }

    pub fn get(&self, question_id: &str, prediction: &str) -> Option<&Judgment> {
        self.entries
            .get(&(question_id.to_string(), prediction_hash(prediction)))
    }

    pub fn insert(&mut self, judgment: Judgment) -> Result<(), MetricError> {
        if judgment.error.is_some() {
            return Ok(());
        }
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| MetricError::Cache {
                    path: path.display().to_string(),
                    reason: e.to_string(),
                })?;
            let line = serde_json::to_string(&judgment).expect("judgment serializes");
            writeln!(f, "{line}").map_err(|e| MetricError::Cache {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
        }
        self.entries.insert(
            (
                judgment.question_id.clone(),
                judgment.prediction_hash.clone(),
            ),
            judgment,
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
