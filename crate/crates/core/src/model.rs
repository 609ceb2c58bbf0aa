//! Domain types shared by the pipelines.
//!
//! Everything here is plain data: immutable once built, `Send + Sync`, and
//! serialized with stable field names (the trace schema in `schema/` is
//! generated from these definitions).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The exact answer text the prompts mandate when evidence is insufficient.
pub const ABSTENTION: &str = "I don't know.";

/// Current version of the serialized [`PipelineTrace`] layout.
pub const TRACE_SCHEMA_VERSION: u32 = 1;

static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"#(\d+)").unwrap());

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("question text is empty")]
    EmptyQuestion,
    #[error("gold answer list is present but empty")]
    EmptyGold,
    #[error("sub-question {index} references #{reference}, which is not an earlier step")]
    ForwardReference { index: u32, reference: u64 },
    #[error("no answered step #{0} in history")]
    MissingAntecedent(u64),
    #[error(
        "sub-question indices must be contiguous from 1, found {found} at position {position}"
    )]
    NonContiguous { position: usize, found: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct Question {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answers: Option<Vec<String>>,
}

impl Question {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self, ModelError> {
        let q = Question {
            id: id.into(),
            text: text.into(),
            gold_answers: None,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn with_gold(mut self, gold: Vec<String>) -> Result<Self, ModelError> {
        self.gold_answers = Some(gold);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.text.trim().is_empty() {
            return Err(ModelError::EmptyQuestion);
        }
        if matches!(&self.gold_answers, Some(g) if g.is_empty()) {
            return Err(ModelError::EmptyGold);
        }
        Ok(())
    }
}

/// Placeholder references (`#k`) in `text`, in order of appearance.
///
/// Digits are consumed greedily, so `#10` is placeholder 10. Values that do
/// not fit in a `u64` saturate, which makes them forward references.
pub fn placeholders(text: &str) -> Vec<u64> {
    PLACEHOLDER
        .captures_iter(text)
        .map(|c| c[1].parse::<u64>().unwrap_or(u64::MAX))
        .collect()
}

pub fn has_placeholder(text: &str) -> bool {
    PLACEHOLDER.is_match(text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct SubQuestion {
    /// 1-based position in the plan.
    pub index: u32,
    pub template_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved_text: Option<String>,
}

impl SubQuestion {
    pub fn new(index: u32, template_text: impl Into<String>) -> Result<Self, ModelError> {
        let sub = SubQuestion {
            index,
            template_text: template_text.into(),
            resolved_text: None,
        };
        sub.check_references()?;
        Ok(sub)
    }

    pub fn check_references(&self) -> Result<(), ModelError> {
        for k in placeholders(&self.template_text) {
            if k == 0 || k >= u64::from(self.index) {
                return Err(ModelError::ForwardReference {
                    index: self.index,
                    reference: k,
                });
            }
        }
        Ok(())
    }

    pub fn resolved(mut self, text: impl Into<String>) -> Self {
        self.resolved_text = Some(text.into());
        self
    }

    /// The text to send downstream: the resolved form when present.
    pub fn text(&self) -> &str {
        self.resolved_text.as_deref().unwrap_or(&self.template_text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct DecompositionPlan {
    pub original: Question,
    pub reasoning: String,
    /// Empty when the decomposer judged the question simple ("None").
    pub subs: Vec<SubQuestion>,
    /// 0 for the initial plan, k for the k-th reflection.
    pub generation: u32,
    /// Set when a re-decomposition reproduced an earlier plan verbatim.
    #[serde(default)]
    pub repeated: bool,
}

impl DecompositionPlan {
    pub fn new(
        original: Question,
        reasoning: impl Into<String>,
        subs: Vec<SubQuestion>,
        generation: u32,
    ) -> Result<Self, ModelError> {
        let plan = DecompositionPlan {
            original,
            reasoning: reasoning.into(),
            subs,
            generation,
            repeated: false,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Plan with no sub-questions: the question is handled as a single step.
    pub fn simple(original: Question, reasoning: impl Into<String>, generation: u32) -> Self {
        DecompositionPlan {
            original,
            reasoning: reasoning.into(),
            subs: Vec::new(),
            generation,
            repeated: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (position, sub) in self.subs.iter().enumerate() {
            if sub.index as usize != position + 1 {
                return Err(ModelError::NonContiguous {
                    position: position + 1,
                    found: sub.index,
                });
            }
            sub.check_references()?;
        }
        Ok(())
    }

    pub fn is_simple(&self) -> bool {
        self.subs.is_empty()
    }

    /// Numbered listing, one sub-question per line, as the prompts show plans.
    pub fn numbered(&self) -> String {
        self.subs
            .iter()
            .map(|s| format!("{}. {}", s.index, s.template_text))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// True when both plans ask the same sub-questions in the same order.
    pub fn same_steps(&self, other: &DecompositionPlan) -> bool {
        self.subs.len() == other.subs.len()
            && self
                .subs
                .iter()
                .zip(&other.subs)
                .all(|(a, b)| a.template_text.trim() == b.template_text.trim())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct CitedAnswer {
    pub text: String,
    pub citations: BTreeSet<u32>,
    pub is_abstention: bool,
}

impl CitedAnswer {
    pub fn abstention() -> Self {
        CitedAnswer {
            text: ABSTENTION.to_string(),
            citations: BTreeSet::new(),
            is_abstention: true,
        }
    }

    /// Drops citations that are not in `valid`; returns the dropped ids.
    pub fn prune_citations(&mut self, valid: &BTreeSet<u32>) -> Vec<u32> {
        let dropped: Vec<u32> = self.citations.difference(valid).copied().collect();
        self.citations.retain(|c| valid.contains(c));
        dropped
    }
}

/// Reads `[n]` citation markers out of a model answer.
///
/// Only non-negative integers inside single square brackets count; anything
/// else (`[a]`, `[[1]]`, `[ 1 ]`, overflow) is skipped. The text is kept as is.
pub fn extract_citations(raw_answer: &str) -> CitedAnswer {
    let is_abstention = raw_answer.trim() == ABSTENTION;
    let mut citations = BTreeSet::new();
    if !is_abstention {
        let bytes = raw_answer.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            if bytes[i] == b'[' && (i == 0 || bytes[i - 1] != b'[') {
                let start = i + 1;
                let mut end = start;
                while end < bytes.len() && bytes[end].is_ascii_digit() {
                    end += 1;
                }
                let closed = end < bytes.len() && bytes[end] == b']';
                let doubled = closed && end + 1 < bytes.len() && bytes[end + 1] == b']';
                if end > start && closed && !doubled {
                    if let Ok(n) = raw_answer[start..end].parse::<u32>() {
                        citations.insert(n);
                    }
                    i = end + 1;
                    continue;
                }
            }
            i += 1;
        }
    }
    CitedAnswer {
        text: raw_answer.to_string(),
        citations,
        is_abstention,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct QARecord {
    pub sub_question: SubQuestion,
    pub reasoning: String,
    pub answer: CitedAnswer,
}

/// Replaces every `#k` in the sub-question template with the verbatim answer
/// text of history step `k`.
pub fn substitute_placeholders(
    sub: &SubQuestion,
    history: &[QARecord],
) -> Result<String, ModelError> {
    sub.check_references()?;
    let lookup = |k: u64| {
        history
            .iter()
            .find(|r| u64::from(r.sub_question.index) == k)
            .map(|r| r.answer.text.as_str())
    };
    for k in placeholders(&sub.template_text) {
        if lookup(k).is_none() {
            return Err(ModelError::MissingAntecedent(k));
        }
    }
    Ok(PLACEHOLDER
        .replace_all(&sub.template_text, |c: &regex::Captures<'_>| {
            let k = c[1].parse::<u64>().unwrap_or(u64::MAX);
            lookup(k).unwrap_or_default().to_string()
        })
        .into_owned())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Passage {
    /// Identifier within one retrieval batch, contiguous from 1.
    pub local_id: u32,
    pub doc_id: String,
    pub title: String,
    pub text: String,
    pub score: f64,
}

/// Renumbers passages 1..k in their current order.
pub fn renumber(passages: &mut [Passage]) {
    for (i, p) in passages.iter_mut().enumerate() {
        p.local_id = i as u32 + 1;
    }
}

pub fn batch_ids(passages: &[Passage]) -> BTreeSet<u32> {
    passages.iter().map(|p| p.local_id).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct Verdict {
    pub accepted: bool,
    pub reason: String,
}

impl Verdict {
    pub fn accept(reason: impl Into<String>) -> Self {
        Verdict {
            accepted: true,
            reason: reason.into(),
        }
    }

    pub fn reject(reason: impl Into<String>) -> Self {
        let reason = reason.into();
        let reason = if reason.trim().is_empty() {
            "rejected without explanation".to_string()
        } else {
            reason
        };
        Verdict {
            accepted: false,
            reason,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Simple,
    Multihop,
    SimpleEscalated,
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Route::Simple => "simple",
            Route::Multihop => "multihop",
            Route::SimpleEscalated => "simple_escalated",
        })
    }
}

/// One model call, as recorded in the trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct CallRecord {
    pub module: String,
    pub model: String,
    /// `simple`, `multihop`, or `judge`.
    pub phase: String,
    /// Multihop attempt the call belongs to (0 for the simple path).
    pub attempt: u32,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Counts came from whitespace tokenization, not the backend.
    pub approximate: bool,
}

impl CallRecord {
    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct StepTrace {
    pub step_index: u32,
    pub constructed_query: String,
    pub retrieval_needed: bool,
    pub rewrites: Vec<String>,
    /// Passages from the last retrieval of this step.
    pub retrieved: Vec<Passage>,
    /// Local ids after reranking; empty when reranking did not run.
    pub reranked_order: Vec<u32>,
    pub record: QARecord,
    pub step_verdict: Verdict,
    pub retries_used: u32,
    /// The constructor left a placeholder and deterministic substitution was used.
    #[serde(default)]
    pub construct_fallback: bool,
    /// Final non-abstention answer carried no citation.
    #[serde(default)]
    pub uncited: bool,
    /// Answers rejected by verification before the recorded one.
    #[serde(default)]
    pub rejected_answers: Vec<CitedAnswer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Attempt {
    pub plan: DecompositionPlan,
    pub steps: Vec<StepTrace>,
    #[serde(rename = "final")]
    pub final_answer: CitedAnswer,
    pub final_reasoning: String,
    pub verdict: Verdict,
    /// Passages shown to final verification, renumbered from 1.
    pub supporting_passages: Vec<Passage>,
    /// Guidance from reflection that produced this attempt's plan, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflection_analysis: Option<String>,
    /// Cumulative trace token usage once this attempt finished.
    pub token_usage: u64,
    #[serde(default)]
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct PipelineTrace {
    pub schema_version: u32,
    pub question: Question,
    pub config_label: String,
    pub route: Route,
    /// The single-retrieval attempt, when the simple pipeline ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simple_path: Option<StepTrace>,
    pub attempts: Vec<Attempt>,
    pub final_answer: CitedAnswer,
    /// False when no verifier accepted the returned answer.
    pub verified: bool,
    pub token_usage: u64,
    pub approximate_tokens: bool,
    pub calls: Vec<CallRecord>,
    /// Model name per module, as configured for this run.
    pub module_models: BTreeMap<String, String>,
    #[serde(default)]
    pub errors: Vec<String>,
    pub wall_time: f64,
}

impl PipelineTrace {
    /// Canonical JSON form written to the trace store.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serialization is infallible")
    }

    pub fn recompute_tokens(&mut self) {
        self.token_usage = self.calls.iter().map(CallRecord::total_tokens).sum();
        self.approximate_tokens = self.calls.iter().any(|c| c.approximate);
    }
}

/// JSON Schema for [`PipelineTrace`]; the frozen copy lives in `schema/trace.v1.json`.
pub fn trace_schema() -> serde_json::Value {
    serde_json::to_value(schemars::schema_for!(PipelineTrace)).expect("schema serializes")
}
