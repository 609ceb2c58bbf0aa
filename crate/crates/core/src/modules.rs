//! Prompt-backed reasoning operations.
//!
//! Each operation renders its template, calls the gateway with the model
//! assigned to that module, and parses the labeled output into domain types.
//! A [`Reasoner`] carries no state besides the log of calls it made.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{
    parse_fields, Completion, Gateway, GatewayError, ModelSpec, TemplateError, TemplateSet,
};
use crate::model::{
    batch_ids, extract_citations, has_placeholder, substitute_placeholders, CallRecord,
    CitedAnswer, DecompositionPlan, ModelError, Passage, PipelineTrace, QARecord, Question,
    SubQuestion, Verdict,
};
use crate::retrieval::truncate_passages;

/// Text the improve-analysis prompt asks for when the plan needs no change.
pub const APPROPRIATE_SENTINEL: &str = "The previous decomposition is appropriate.";

/// Maximum ranking length the rerank prompt asks for.
pub const RERANK_LIMIT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    #[serde(alias = "qd")]
    Decompose,
    #[serde(alias = "qc")]
    Construct,
    #[serde(alias = "rd")]
    Decide,
    #[serde(alias = "qr")]
    Rewrite,
    #[serde(alias = "pr")]
    Rerank,
    #[serde(alias = "ag")]
    Answer,
    #[serde(alias = "av")]
    Verify,
    Finalize,
    ImproveAnalysis,
    ImproveDecomposition,
    FinalVerify,
    Evaluate,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 12] = [
        ModuleKind::Decompose,
        ModuleKind::Construct,
        ModuleKind::Decide,
        ModuleKind::Rewrite,
        ModuleKind::Rerank,
        ModuleKind::Answer,
        ModuleKind::Verify,
        ModuleKind::Finalize,
        ModuleKind::ImproveAnalysis,
        ModuleKind::ImproveDecomposition,
        ModuleKind::FinalVerify,
        ModuleKind::Evaluate,
    ];

    /// Template name, also used as the module tag in traces and scripts.
    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::Decompose => "decompose",
            ModuleKind::Construct => "construct",
            ModuleKind::Decide => "decide",
            ModuleKind::Rewrite => "rewrite",
            ModuleKind::Rerank => "rerank",
            ModuleKind::Answer => "answer",
            ModuleKind::Verify => "verify",
            ModuleKind::Finalize => "finalize",
            ModuleKind::ImproveAnalysis => "improve_analysis",
            ModuleKind::ImproveDecomposition => "improve_decomposition",
            ModuleKind::FinalVerify => "final_verify",
            ModuleKind::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModuleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase();
        ModuleKind::ALL
            .into_iter()
            .find(|k| k.as_str() == key)
            .or(match key.as_str() {
                "qd" => Some(ModuleKind::Decompose),
                "qc" => Some(ModuleKind::Construct),
                "rd" => Some(ModuleKind::Decide),
                "qr" => Some(ModuleKind::Rewrite),
                "pr" => Some(ModuleKind::Rerank),
                "ag" => Some(ModuleKind::Answer),
                "av" => Some(ModuleKind::Verify),
                _ => None,
            })
            .ok_or_else(|| format!("unknown module '{s}'"))
    }
}

/// Model per module, with a default for modules not listed.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelAssignment {
    pub default: ModelSpec,
    pub overrides: BTreeMap<ModuleKind, ModelSpec>,
}

impl ModelAssignment {
    pub fn uniform(default: ModelSpec) -> Self {
        ModelAssignment {
            default,
            overrides: BTreeMap::new(),
        }
    }

    pub fn spec_for(&self, kind: ModuleKind) -> &ModelSpec {
        self.overrides.get(&kind).unwrap_or(&self.default)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        self.default.validate()?;
        self.overrides.values().try_for_each(ModelSpec::validate)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModuleError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("malformed decomposition: {0}")]
    MalformedPlan(String),
    #[error("expected true or false, got {0:?}")]
    UnparseableBoolean(String),
    #[error("no valid passage id in ranking {0:?}")]
    UnparseableRanking(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
}

impl ModuleError {
    /// Errors a reminder retry can plausibly fix.
    fn is_format(&self) -> bool {
        matches!(
            self,
            ModuleError::Template(
                TemplateError::MissingField(_) | TemplateError::DuplicateField(_)
            ) | ModuleError::MalformedPlan(_)
                | ModuleError::UnparseableBoolean(_)
                | ModuleError::UnparseableRanking(_)
        )
    }
}

/// The one boolean reader shared by retrieval decision, verification and
/// evaluation outputs.
pub fn parse_bool(raw: &str) -> Result<bool, ModuleError> {
    let cleaned = raw
        .trim()
        .trim_matches(|c: char| matches!(c, '"' | '\'' | '`' | '*' | '.') || c.is_whitespace())
        .to_ascii_lowercase();
    match cleaned.as_str() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ModuleError::UnparseableBoolean(raw.trim().to_string())),
    }
}

static NUMBERED_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(\d+)\s*[.):]\s*(\S.*?)\s*$").unwrap());
static BRACKET_ID: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[(\d+)\]").unwrap());

/// Parses a numbered sub-question listing, or `None` for a simple question.
pub fn parse_plan(
    original: &Question,
    reasoning: &str,
    listing: &str,
    generation: u32,
) -> Result<DecompositionPlan, ModuleError> {
    let trimmed = listing.trim();
    let bare = trimmed.trim_matches(|c: char| matches!(c, '"' | '.' | '*' | '`'));
    if bare.eq_ignore_ascii_case("none") {
        return Ok(DecompositionPlan::simple(
            original.clone(),
            reasoning,
            generation,
        ));
    }
    let mut subs = Vec::new();
    for line in trimmed.lines().filter(|l| !l.trim().is_empty()) {
        let caps = NUMBERED_LINE.captures(line).ok_or_else(|| {
            ModuleError::MalformedPlan(format!("unnumbered line {:?}", line.trim()))
        })?;
        let number: u32 = caps[1]
            .parse()
            .map_err(|_| ModuleError::MalformedPlan(format!("bad step number in {line:?}")))?;
        let expected = subs.len() as u32 + 1;
        if number != expected {
            return Err(ModuleError::MalformedPlan(format!(
                "expected step {expected}, found {number}"
            )));
        }
        let sub = SubQuestion::new(number, &caps[2])
            .map_err(|e| ModuleError::MalformedPlan(e.to_string()))?;
        subs.push(sub);
    }
    if subs.is_empty() {
        return Err(ModuleError::MalformedPlan("no sub-questions".into()));
    }
    DecompositionPlan::new(original.clone(), reasoning, subs, generation)
        .map_err(|e| ModuleError::MalformedPlan(e.to_string()))
}

/// Result of repairing a model ranking line against a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankRepair {
    pub order: Vec<u32>,
    /// Ids from the line that survived the repair (before padding).
    pub parsed: usize,
}

/// Turns a noisy `[a] > [b] > ...` line into a ranking over `batch`.
///
/// Unknown ids are dropped, repeats keep their first position, the list is
/// cut at ten, and if it is then shorter than `min(10, k)` the missing ids
/// are appended in retrieval order.
pub fn repair_ranking(line: &str, batch: &[u32]) -> RankRepair {
    let limit = RERANK_LIMIT.min(batch.len());
    let known: BTreeSet<u32> = batch.iter().copied().collect();
    let mut order: Vec<u32> = Vec::with_capacity(limit);
    for caps in BRACKET_ID.captures_iter(line) {
        let Ok(id) = caps[1].parse::<u32>() else {
            continue;
        };
        if known.contains(&id) && !order.contains(&id) {
            order.push(id);
            if order.len() == limit {
                break;
            }
        }
    }
    let parsed = order.len();
    for id in batch {
        if order.len() == limit {
            break;
        }
        if !order.contains(id) {
            order.push(*id);
        }
    }
    RankRepair { order, parsed }
}

/// Reorders passages by a ranking of their local ids. Ids not in the ranking
/// are dropped.
pub fn apply_order(batch: &[Passage], order: &[u32]) -> Vec<Passage> {
    order
        .iter()
        .filter_map(|id| batch.iter().find(|p| p.local_id == *id).cloned())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalDecision {
    pub needed: bool,
    pub analysis: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RerankResult {
    pub reasoning: String,
    pub order: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Constructed {
    pub text: String,
    /// The model output still had a placeholder; deterministic substitution was used.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedAnswer {
    pub answer: CitedAnswer,
    pub reasoning: String,
    /// Non-abstention answer without any citation.
    pub uncited: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Analysis {
    pub text: String,
    /// The analysis says the previous plan was fine.
    pub appropriate: bool,
}

/// `Question #k / Answer #k / Reasoning #k` listing of answered steps.
pub fn serialize_history(history: &[QARecord]) -> String {
    history
        .iter()
        .map(|r| {
            let k = r.sub_question.index;
            format!(
                "Question #{k}: {}\nAnswer #{k}: {}\nReasoning #{k}: {}",
                r.sub_question.text(),
                r.answer.text,
                r.reasoning
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Background passed to answer generation for a sub-question.
pub fn step_background(original: &Question, history: &[QARecord]) -> String {
    if history.is_empty() {
        format!("Original Question: {}", original.text)
    } else {
        format!(
            "Original Question: {}\n\n{}",
            original.text,
            serialize_history(history)
        )
    }
}

fn render_passages(passages: &[Passage], budget: Option<usize>) -> String {
    if passages.is_empty() {
        return "none".to_string();
    }
    let shown = match budget {
        Some(b) => truncate_passages(passages, b),
        None => passages.to_vec(),
    };
    shown
        .iter()
        .map(|p| format!("[{}] {}\n{}", p.local_id, p.title, p.text))
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn field<'m>(fields: &'m BTreeMap<String, String>, label: &str) -> &'m str {
    fields.get(label).map(String::as_str).unwrap_or_default()
}

/// Runs reasoning operations against a gateway and records each call.
pub struct Reasoner<'a> {
    gateway: &'a Gateway,
    templates: &'a TemplateSet,
    models: &'a ModelAssignment,
    passage_budget: Option<usize>,
    phase: &'static str,
    attempt: u32,
    calls: Vec<CallRecord>,
}

impl<'a> Reasoner<'a> {
    pub fn new(
        gateway: &'a Gateway,
        templates: &'a TemplateSet,
        models: &'a ModelAssignment,
    ) -> Self {
        Reasoner {
            gateway,
            templates,
            models,
            passage_budget: None,
            phase: "multihop",
            attempt: 0,
            calls: Vec::new(),
        }
    }

    pub fn with_passage_budget(mut self, budget: Option<usize>) -> Self {
        self.passage_budget = budget;
        self
    }

    /// Tags subsequent call records.
    pub fn set_phase(&mut self, phase: &'static str, attempt: u32) {
        self.phase = phase;
        self.attempt = attempt;
    }

    pub fn calls(&self) -> &[CallRecord] {
        &self.calls
    }

    pub fn take_calls(&mut self) -> Vec<CallRecord> {
        std::mem::take(&mut self.calls)
    }

    pub fn tokens_used(&self) -> u64 {
        self.calls.iter().map(CallRecord::total_tokens).sum()
    }

    fn record(&mut self, kind: ModuleKind, spec: &ModelSpec, completion: &Completion) {
        self.calls.push(CallRecord {
            module: kind.as_str().to_string(),
            model: spec.model_name.clone(),
            phase: self.phase.to_string(),
            attempt: self.attempt,
            prompt_tokens: completion.prompt_tokens,
            completion_tokens: completion.completion_tokens,
            approximate: completion.approximate,
        });
    }

    /// Render, complete, parse; one reminder retry on live backends when the
    /// output does not parse.
    fn invoke<T>(
        &mut self,
        kind: ModuleKind,
        pairs: &[(&str, &str)],
        parse: impl Fn(&BTreeMap<String, String>) -> Result<T, ModuleError>,
    ) -> Result<T, ModuleError> {
        let spec = self.models.spec_for(kind);
        let template = self.templates.get(kind.as_str())?;
        let base = template.render_pairs(pairs)?;
        let retries = spec.format_retries();
        let mut tries = 0;
        loop {
            let prompt = if tries == 0 {
                base.clone()
            } else {
                let labels: Vec<String> = template
                    .output_fields
                    .iter()
                    .map(|l| format!("\"{l}: ...\""))
                    .collect();
                format!(
                    "{base}\n\nPlease follow the output format exactly: write each output field on its own line as {}.",
                    labels.join(", ")
                )
            };
            let completion = self.gateway.complete_for(spec, kind.as_str(), &prompt)?;
            self.record(kind, spec, &completion);
            let result = parse_fields(&completion.text, &template.output_fields)
                .map_err(ModuleError::from)
                .and_then(|f| parse(&f));
            match result {
                Err(e) if e.is_format() && tries < retries => tries += 1,
                other => return other,
            }
        }
    }

    pub fn decompose(&mut self, q: &Question) -> Result<DecompositionPlan, ModuleError> {
        q.validate()?;
        self.invoke(ModuleKind::Decompose, &[("Question", &q.text)], |f| {
            parse_plan(q, field(f, "Reasoning"), field(f, "Output"), 0)
        })
    }

    pub fn construct(
        &mut self,
        q: &Question,
        history: &[QARecord],
        sub: &SubQuestion,
    ) -> Result<Constructed, ModuleError> {
        if !has_placeholder(&sub.template_text) {
            return Ok(Constructed {
                text: sub.template_text.clone(),
                fallback: false,
            });
        }
        // validates the precondition before spending a call
        let deterministic = substitute_placeholders(sub, history)?;
        let pairs = if history.is_empty() {
            "none".to_string()
        } else {
            serialize_history(history)
        };
        let rewritten = self.invoke(
            ModuleKind::Construct,
            &[
                ("Original Question", &q.text),
                ("Question-Answer Pairs", &pairs),
                ("New Question", &sub.template_text),
            ],
            |f| Ok(field(f, "Rewritten Question").to_string()),
        )?;
        if rewritten.is_empty() || has_placeholder(&rewritten) {
            Ok(Constructed {
                text: deterministic,
                fallback: true,
            })
        } else {
            Ok(Constructed {
                text: rewritten,
                fallback: false,
            })
        }
    }

    pub fn decide_retrieval(&mut self, q: &str) -> Result<RetrievalDecision, ModuleError> {
        if q.trim().is_empty() {
            return Err(ModuleError::Precondition("empty question".into()));
        }
        self.invoke(ModuleKind::Decide, &[("Question", q)], |f| {
            Ok(RetrievalDecision {
                needed: parse_bool(field(f, "Output"))?,
                analysis: field(f, "Analysis").to_string(),
            })
        })
    }

    /// Never fails: degenerate or failed rewrites fall back to `q`.
    pub fn rewrite_query(&mut self, q: &str, last: Option<&str>) -> String {
        let last_text = last.unwrap_or("none");
        let is_progress = |candidate: &str| {
            !candidate.is_empty()
                && last.is_none_or(|l| !candidate.trim().eq_ignore_ascii_case(l.trim()))
        };
        for _ in 0..2 {
            let out = self.invoke(
                ModuleKind::Rewrite,
                &[("Question", q), ("Last Rewritten Query", last_text)],
                |f| Ok(field(f, "New Query").to_string()),
            );
            match out {
                Ok(candidate) if is_progress(&candidate) => return candidate,
                Ok(_) => continue,
                Err(_) => break,
            }
        }
        q.to_string()
    }

    pub fn rerank(&mut self, query: &str, batch: &[Passage]) -> Result<RerankResult, ModuleError> {
        if batch.is_empty() {
            return Err(ModuleError::Precondition(
                "rerank needs at least one passage".into(),
            ));
        }
        let ids: Vec<u32> = batch.iter().map(|p| p.local_id).collect();
        let contiguous = ids.iter().copied().collect::<BTreeSet<_>>()
            == (1..=batch.len() as u32).collect::<BTreeSet<_>>();
        if !contiguous {
            return Err(ModuleError::Precondition(
                "passage ids are not contiguous from 1".into(),
            ));
        }
        let identifiers = ids
            .iter()
            .map(|i| format!("[{i}]"))
            .collect::<Vec<_>>()
            .join(", ");
        let context = render_passages(batch, self.passage_budget);
        self.invoke(
            ModuleKind::Rerank,
            &[
                ("Query", query),
                ("Identifiers", &identifiers),
                ("Context", &context),
            ],
            |f| {
                let line = field(f, "Output");
                let repair = repair_ranking(line, &ids);
                if repair.parsed == 0 {
                    return Err(ModuleError::UnparseableRanking(line.to_string()));
                }
                Ok(RerankResult {
                    reasoning: field(f, "Reasoning").to_string(),
                    order: repair.order,
                })
            },
        )
    }

    pub fn answer(
        &mut self,
        q: &str,
        passages: &[Passage],
        background: &str,
    ) -> Result<GeneratedAnswer, ModuleError> {
        let context = render_passages(passages, self.passage_budget);
        self.invoke(
            ModuleKind::Answer,
            &[
                ("Question", q),
                ("Context", &context),
                ("Background", background),
            ],
            |f| {
                let answer = extract_citations(field(f, "Output"));
                let uncited = !answer.is_abstention && answer.citations.is_empty();
                Ok(GeneratedAnswer {
                    answer,
                    reasoning: field(f, "Reasoning").to_string(),
                    uncited,
                })
            },
        )
    }

    /// Step-level verification against exactly the passages given.
    /// Abstentions are rejected without a model call.
    pub fn verify(
        &mut self,
        q: &str,
        a: &CitedAnswer,
        cited_passages: &[Passage],
    ) -> Result<Verdict, ModuleError> {
        if a.is_abstention {
            return Ok(Verdict::reject("the answer is an abstention"));
        }
        let source = render_passages(cited_passages, self.passage_budget);
        self.invoke(
            ModuleKind::Verify,
            &[("Question", q), ("Answer", &a.text), ("Source", &source)],
            verdict_from,
        )
    }

    /// Verifies an answer against the batch it was generated from.
    ///
    /// Citations to ids outside the batch are pruned from `a` first; if that
    /// leaves an answer whose every citation was invalid, it is rejected
    /// without a call. An uncited answer is checked against the whole batch.
    pub fn verify_in_batch(
        &mut self,
        q: &str,
        a: &mut CitedAnswer,
        batch: &[Passage],
    ) -> Result<Verdict, ModuleError> {
        if a.is_abstention {
            return Ok(Verdict::reject("the answer is an abstention"));
        }
        let dropped = a.prune_citations(&batch_ids(batch));
        if !dropped.is_empty() && a.citations.is_empty() {
            return Ok(Verdict::reject(format!(
                "the answer cites passages {dropped:?} that are not in the retrieved batch"
            )));
        }
        let cited: Vec<Passage> = if a.citations.is_empty() {
            batch.to_vec()
        } else {
            batch
                .iter()
                .filter(|p| a.citations.contains(&p.local_id))
                .cloned()
                .collect()
        };
        self.verify(q, a, &cited)
    }

    /// Final-answer verification over the supporting passages of a whole attempt.
    pub fn final_verify(
        &mut self,
        q: &Question,
        a: &CitedAnswer,
        passages: &[Passage],
    ) -> Result<Verdict, ModuleError> {
        if a.is_abstention {
            return Ok(Verdict::reject("the final answer is an abstention"));
        }
        let rendered = render_passages(passages, self.passage_budget);
        self.invoke(
            ModuleKind::FinalVerify,
            &[
                ("Question", &q.text),
                ("Answer", &a.text),
                ("Passages", &rendered),
            ],
            verdict_from,
        )
    }

    pub fn finalize(
        &mut self,
        q: &Question,
        history: &[QARecord],
    ) -> Result<(CitedAnswer, String), ModuleError> {
        if history.is_empty() {
            return Err(ModuleError::Precondition(
                "finalize needs at least one answered step".into(),
            ));
        }
        let info = serialize_history(history);
        self.invoke(
            ModuleKind::Finalize,
            &[("Question", &q.text), ("Decomposed Information", &info)],
            |f| {
                Ok((
                    extract_citations(field(f, "Answer")),
                    field(f, "Reasoning").to_string(),
                ))
            },
        )
    }

    pub fn improve_analysis(
        &mut self,
        q: &Question,
        record: &PipelineTrace,
    ) -> Result<Analysis, ModuleError> {
        let last = record
            .attempts
            .last()
            .ok_or_else(|| ModuleError::Precondition("no attempt to analyze".into()))?;
        if last.verdict.accepted {
            return Err(ModuleError::Precondition(
                "last attempt was accepted".into(),
            ));
        }
        let solving_record = render_solving_record(last);
        self.invoke(
            ModuleKind::ImproveAnalysis,
            &[
                ("Question", &q.text),
                ("Sub-questions Solving Record", &solving_record),
            ],
            |f| {
                let text = field(f, "Analysis").to_string();
                if text.is_empty() {
                    return Err(ModuleError::Template(TemplateError::MissingField(
                        "Analysis".into(),
                    )));
                }
                let appropriate = text
                    .to_ascii_lowercase()
                    .contains("previous decomposition is appropriate");
                Ok(Analysis { text, appropriate })
            },
        )
    }

    /// New plan from all earlier failed plans and their analyses.
    ///
    /// A plan identical to an earlier one gets one more try; if that also
    /// repeats (or fails) the first plan is kept with `repeated` set.
    pub fn improve_decomposition(
        &mut self,
        q: &Question,
        prior_plans: &[(DecompositionPlan, String)],
    ) -> Result<DecompositionPlan, ModuleError> {
        let generation = prior_plans
            .iter()
            .map(|(p, _)| p.generation)
            .max()
            .ok_or_else(|| ModuleError::Precondition("no prior decomposition".into()))?
            + 1;
        let previous = prior_plans
            .iter()
            .enumerate()
            .map(|(i, (plan, analysis))| {
                let listing = if plan.is_simple() { "None".to_string() } else { plan.numbered() };
                format!(
                    "Incorrect decomposition {n}:\n{listing}\nNew decomposition instructions {n}:\n{analysis}",
                    n = i + 1
                )
            })
            .collect::<Vec<_>>()
            .join("\n");
        let mut request = || {
            self.invoke(
                ModuleKind::ImproveDecomposition,
                &[
                    ("Question", &q.text),
                    ("Previous Decompositions", &previous),
                ],
                |f| {
                    parse_plan(
                        q,
                        field(f, "Reasoning"),
                        field(f, "New Decomposition"),
                        generation,
                    )
                },
            )
        };
        let is_repeat =
            |plan: &DecompositionPlan| prior_plans.iter().any(|(p, _)| p.same_steps(plan));
        let first = request()?;
        if !is_repeat(&first) {
            return Ok(first);
        }
        match request() {
            Ok(second) if !is_repeat(&second) => Ok(second),
            _ => Ok(DecompositionPlan {
                repeated: true,
                ..first
            }),
        }
    }

    pub fn llm_eval(
        &mut self,
        q: &Question,
        prediction: &str,
        gold: &[String],
    ) -> Result<bool, ModuleError> {
        if gold.is_empty() {
            return Err(ModuleError::Precondition("no ground truth answers".into()));
        }
        let truth = serde_json::to_string(gold).expect("string list serializes");
        self.invoke(
            ModuleKind::Evaluate,
            &[
                ("Question", &q.text),
                ("Ground Truth Answer", &truth),
                ("Our Answer", prediction),
            ],
            |f| parse_bool(field(f, "Output")),
        )
    }
}

fn verdict_from(f: &BTreeMap<String, String>) -> Result<Verdict, ModuleError> {
    let accepted = parse_bool(field(f, "Output"))?;
    let reason = field(f, "Reason");
    Ok(if accepted {
        Verdict::accept(reason)
    } else {
        Verdict::reject(reason)
    })
}

fn render_solving_record(attempt: &crate::model::Attempt) -> String {
    let mut out = String::new();
    out.push_str("Original decomposition:\n");
    if attempt.plan.is_simple() {
        out.push_str("None (the question was answered as a single step)");
    } else {
        out.push_str(&attempt.plan.numbered());
    }
    for step in &attempt.steps {
        let k = step.step_index;
        out.push_str(&format!(
            "\n\nSub-question #{k}: {}\nRewritten sub-question #{k}: {}\nReasoning #{k}: {}\nAnswer #{k}: {}",
            step.record.sub_question.template_text,
            step.constructed_query,
            step.record.reasoning,
            step.record.answer.text
        ));
    }
    out.push_str(&format!(
        "\n\nFinal answer: {}\nFinal verification: {}",
        attempt.final_answer.text, attempt.verdict.reason
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Script, ScriptEntry};

    fn q(text: &str) -> Question {
        Question::new("q1", text).unwrap()
    }

    fn passages(n: u32) -> Vec<Passage> {
        (1..=n)
            .map(|i| Passage {
                local_id: i,
                doc_id: format!("d{i}"),
                title: format!("T{i}"),
                text: format!("text {i}"),
                score: 1.0,
            })
            .collect()
    }

    struct Fixture {
        gateway: Gateway,
        templates: TemplateSet,
        models: ModelAssignment,
    }

    impl Fixture {
        fn new(entries: Vec<ScriptEntry>) -> Self {
            Fixture {
                gateway: Gateway::with_script(Script::new(entries)),
                templates: TemplateSet::builtin(),
                models: ModelAssignment::uniform(ModelSpec::scripted("test-model")),
            }
        }

        fn reasoner(&self) -> Reasoner<'_> {
            Reasoner::new(&self.gateway, &self.templates, &self.models)
        }
    }

    #[test]
    fn bool_parsing_is_shared_and_strict() {
        assert!(parse_bool(" True ").unwrap());
        assert!(!parse_bool("\"false\".").unwrap());
        assert!(!parse_bool("FALSE").unwrap());
        assert!(matches!(
            parse_bool("maybe"),
            Err(ModuleError::UnparseableBoolean(_))
        ));
        assert!(parse_bool("true false").is_err());
    }

    #[test]
    fn decompose_none_is_simple() {
        let fx = Fixture::new(vec![ScriptEntry::new(
            "decompose",
            "Reasoning: The question asks for a direct fact that does not require multiple steps or dependencies.\nOutput: None",
        )]);
        let plan = fx
            .reasoner()
            .decompose(&q("What is the capital of France?"))
            .unwrap();
        assert!(plan.is_simple());
        assert_eq!(plan.generation, 0);
    }

    #[test]
    fn decompose_iphone_example() {
        let fx = Fixture::new(vec![ScriptEntry::new(
            "decompose",
            "Reasoning: To answer this question, it is necessary to identify the company associated with the brand producing iPhones first.\nOutput:\n1. What is the company owns the brand that produces iPhones?\n2. Who is the CEO of #1?",
        )]);
        let plan = fx
            .reasoner()
            .decompose(&q(
                "Who is the CEO of the company owns the brand that produces iPhones?",
            ))
            .unwrap();
        let texts: Vec<_> = plan.subs.iter().map(|s| s.template_text.as_str()).collect();
        assert_eq!(
            texts,
            [
                "What is the company owns the brand that produces iPhones?",
                "Who is the CEO of #1?"
            ]
        );
    }

    #[test]
    fn decompose_gap_is_malformed() {
        let fx = Fixture::new(vec![ScriptEntry::new(
            "decompose",
            "Reasoning: x\nOutput:\n1. A?\n3. B?",
        )]);
        assert!(matches!(
            fx.reasoner().decompose(&q("x?")),
            Err(ModuleError::MalformedPlan(_))
        ));
        let fx = Fixture::new(vec![ScriptEntry::new(
            "decompose",
            "Reasoning: x\nOutput:\n1. A #1?",
        )]);
        assert!(matches!(
            fx.reasoner().decompose(&q("x?")),
            Err(ModuleError::MalformedPlan(_))
        ));
    }

    #[test]
    fn format_retry_on_live_backend_only() {
        // scripted: no retry, second entry untouched
        let fx = Fixture::new(vec![
            ScriptEntry::new("decide", "Analysis: x\nOutput: maybe"),
            ScriptEntry::new("decide", "Analysis: x\nOutput: true"),
        ]);
        let mut r = fx.reasoner();
        assert!(matches!(
            r.decide_retrieval("q?"),
            Err(ModuleError::UnparseableBoolean(_))
        ));
        assert_eq!(r.calls().len(), 1);
    }

    fn history_one(answer: &str) -> Vec<QARecord> {
        vec![QARecord {
            sub_question: SubQuestion::new(
                1,
                "What is the company owns the brand that produces iPhones?",
            )
            .unwrap()
            .resolved("What is the company owns the brand that produces iPhones?"),
            reasoning: "r".into(),
            answer: extract_citations(answer),
        }]
    }

    #[test]
    fn construct_matches_deterministic_substitution() {
        let fx = Fixture::new(vec![ScriptEntry::new(
            "construct",
            "Rewritten Question: Who is the CEO of Apple Inc.?",
        )]);
        let history = history_one("Apple Inc.");
        let sub = SubQuestion::new(2, "Who is the CEO of #1?").unwrap();
        let out = fx
            .reasoner()
            .construct(
                &q("Who is the CEO of the company owns the brand that produces iPhones?"),
                &history,
                &sub,
            )
            .unwrap();
        // oracle: the deterministic path
        assert_eq!(out.text, substitute_placeholders(&sub, &history).unwrap());
        assert!(!out.fallback);
    }

    #[test]
    fn construct_without_placeholder_skips_model() {
        let fx = Fixture::new(vec![]);
        let mut r = fx.reasoner();
        let sub = SubQuestion::new(1, "What is the capital of France?").unwrap();
        let out = r.construct(&q("x?"), &[], &sub).unwrap();
        assert_eq!(out.text, "What is the capital of France?");
        assert!(r.calls().is_empty());
    }

    #[test]
    fn construct_falls_back_when_placeholder_survives() {
        let fx = Fixture::new(vec![ScriptEntry::new(
            "construct",
            "Rewritten Question: Who is the CEO of #1?",
        )]);
        let sub = SubQuestion::new(2, "Who is the CEO of #1?").unwrap();
        let out = fx
            .reasoner()
            .construct(&q("x?"), &history_one("Apple Inc. [1]"), &sub)
            .unwrap();
        assert_eq!(out.text, "Who is the CEO of Apple Inc. [1]?");
        assert!(out.fallback);
    }

    #[test]
    fn construct_after_abstention_is_placeholder_free() {
        let fx = Fixture::new(vec![ScriptEntry::new(
            "construct",
            "Rewritten Question: Who is the CEO of the company that owns the iPhone brand?",
        )]);
        let sub = SubQuestion::new(2, "Who is the CEO of #1?").unwrap();
        let out = fx
            .reasoner()
            .construct(&q("x?"), &history_one("I don't know."), &sub)
            .unwrap();
        assert!(!has_placeholder(&out.text));
    }

    #[test]
    fn decide_examples() {
        let fx = Fixture::new(vec![
            ScriptEntry::new("decide", "Analysis: The question does not provide a birth date, so we need additional info.\nOutput: true")
                .containing("Question: What is the birth date of Lily?"),
            ScriptEntry::new("decide", "Analysis: The question includes all needed information in the text.\nOutput: false"),
        ]);
        let mut r = fx.reasoner();
        assert!(
            r.decide_retrieval("What is the birth date of Lily?")
                .unwrap()
                .needed
        );
        let d = r
            .decide_retrieval("Alice was born on April 6, 2001 and Jack was born on May 15, 2002. Which person was born earlier?")
            .unwrap();
        assert!(!d.needed);
    }

    #[test]
    fn rewrite_examples_and_fallback() {
        let fx = Fixture::new(vec![
            ScriptEntry::new("rewrite", "New Query: France capital city")
                .containing("Last Rewritten Query: Capital city of France"),
            ScriptEntry::new("rewrite", "New Query: Tallest mountain in the world")
                .containing("Last Rewritten Query: none"),
            ScriptEntry::new("rewrite", "New Query: same query"),
        ]);
        let mut r = fx.reasoner();
        assert_eq!(
            r.rewrite_query(
                "What is the capital of France?",
                Some("Capital city of France")
            ),
            "France capital city"
        );
        assert_eq!(
            r.rewrite_query("What is the tallest mountain in the world?", None),
            "Tallest mountain in the world"
        );
        assert_eq!(
            r.rewrite_query("Original?", Some("same query")),
            "Original?"
        );
    }

    #[test]
    fn rerank_examples() {
        let fx = Fixture::new(vec![
            ScriptEntry::new(
                "rerank",
                "Reasoning: r\nOutput: [2] > [3] > [5] > [1] > [4]",
            ),
            ScriptEntry::new("rerank", "Reasoning: r\nOutput: [2] > [2] > [9] > [3]"),
            ScriptEntry::new("rerank", "Reasoning: r\nOutput: [1]"),
            ScriptEntry::new("rerank", "Reasoning: r\nOutput: no idea"),
        ]);
        let mut r = fx.reasoner();
        assert_eq!(r.rerank("q", &passages(5)).unwrap().order, [2, 3, 5, 1, 4]);
        assert_eq!(r.rerank("q", &passages(3)).unwrap().order, [2, 3, 1]);
        assert_eq!(r.rerank("q", &passages(1)).unwrap().order, [1]);
        assert!(matches!(
            r.rerank("q", &passages(2)),
            Err(ModuleError::UnparseableRanking(_))
        ));
        assert!(matches!(
            r.rerank("q", &[]),
            Err(ModuleError::Precondition(_))
        ));
    }

    #[test]
    fn repair_rules() {
        let ids: Vec<u32> = (1..=12).collect();
        let r = repair_ranking("[12] > [12] > [0] > [3]", &ids);
        assert_eq!(r.order, [12, 3, 1, 2, 4, 5, 6, 7, 8, 9]);
        assert_eq!(r.parsed, 2);
        let r = repair_ranking("[1]>[2]>[3]>[4]>[5]>[6]>[7]>[8]>[9]>[10]>[11]", &ids);
        assert_eq!(r.order, (1..=10).collect::<Vec<_>>());
    }

    #[test]
    fn answer_examples() {
        let fx = Fixture::new(vec![
            ScriptEntry::new(
                "answer",
                "Reasoning: passage 1 says so\nOutput: He went to school at 8 am [1].",
            ),
            ScriptEntry::new(
                "answer",
                "Reasoning: nothing relevant\nOutput: I don't know.",
            ),
            ScriptEntry::new("answer", "Reasoning: r\nOutput: Paris"),
        ]);
        let mut r = fx.reasoner();
        let a = r.answer("When?", &passages(2), "none").unwrap();
        assert_eq!(a.answer.citations, BTreeSet::from([1]));
        assert!(a.answer.text.ends_with("[1]."));
        let b = r.answer("When?", &passages(2), "none").unwrap();
        assert!(b.answer.is_abstention && b.answer.citations.is_empty() && !b.uncited);
        let c = r.answer("When?", &passages(2), "none").unwrap();
        assert!(c.uncited && c.answer.citations.is_empty());
    }

    #[test]
    fn verify_examples() {
        let fx = Fixture::new(vec![ScriptEntry::new(
            "verify",
            "Reason: supported\nOutput: true",
        )
        .repeating()]);
        let mut r = fx.reasoner();
        let v = r
            .verify("q", &CitedAnswer::abstention(), &passages(1))
            .unwrap();
        assert!(!v.accepted);
        assert!(r.calls().is_empty());

        let v = r
            .verify("q", &extract_citations("x [1]"), &passages(1))
            .unwrap();
        assert!(v.accepted);

        // citation to a passage outside the batch: pruned, then rejected
        let mut a = extract_citations("x [7]");
        let v = r.verify_in_batch("q", &mut a, &passages(3)).unwrap();
        assert!(!v.accepted);
        assert!(a.citations.is_empty());
        assert_eq!(r.calls().len(), 1);

        // mixed valid and invalid citations: verified against the remaining one
        let mut a = extract_citations("x [2][9]");
        let v = r.verify_in_batch("q", &mut a, &passages(3)).unwrap();
        assert!(v.accepted);
        assert_eq!(a.citations, BTreeSet::from([2]));
    }

    #[test]
    fn finalize_comparison() {
        let fx = Fixture::new(vec![ScriptEntry::new(
            "finalize",
            "Reasoning: 38 million is larger than 26 million.\nAnswer: Canada has a larger population.",
        )]);
        let history = vec![
            QARecord {
                sub_question: SubQuestion::new(1, "What is the population of Canada?")
                    .unwrap()
                    .resolved("What is the population of Canada?"),
                reasoning: "r".into(),
                answer: extract_citations("38 million [1]"),
            },
            QARecord {
                sub_question: SubQuestion::new(2, "What is the population of Australia?")
                    .unwrap()
                    .resolved("What is the population of Australia?"),
                reasoning: "r".into(),
                answer: extract_citations("26 million [2]"),
            },
        ];
        let (a, _) = fx
            .reasoner()
            .finalize(
                &q("Which country has a larger population, Canada or Australia?"),
                &history,
            )
            .unwrap();
        assert!(a.text.contains("Canada"));
        assert!(fx.reasoner().finalize(&q("x?"), &[]).is_err());
    }

    #[test]
    fn llm_eval_cases() {
        let fx = Fixture::new(vec![
            ScriptEntry::new("evaluate", "Reasoning: same\nOutput: true"),
            ScriptEntry::new("evaluate", "Reasoning: differs\nOutput: false"),
        ]);
        let mut r = fx.reasoner();
        let gold = vec!["Tim Cook".to_string()];
        assert!(r.llm_eval(&q("Who?"), "Tim Cook", &gold).unwrap());
        assert!(!r.llm_eval(&q("Who?"), "Steve Jobs", &gold).unwrap());
        assert!(matches!(
            r.llm_eval(&q("Who?"), "x", &[]),
            Err(ModuleError::Precondition(_))
        ));
    }

    #[test]
    fn improve_decomposition_repeat_and_precondition() {
        let original = q("Which city is home to the headquarters of the company founded by the inventor of the telephone?");
        let old = parse_plan(
            &original,
            "",
            "1. Who invented the telephone?\n2. Which company was founded by #1?\n3. Which city is home to the headquarters of #2?",
            0,
        )
        .unwrap();
        let same = "Reasoning: r\nNew Decomposition:\n1. Who invented the telephone?\n2. Which company was founded by #1?\n3. Which city is home to the headquarters of #2?";
        let fx = Fixture::new(vec![
            ScriptEntry::new("improve_decomposition", same),
            ScriptEntry::new("improve_decomposition", same),
        ]);
        let prior = vec![(old.clone(), "be specific".to_string())];
        let plan = fx
            .reasoner()
            .improve_decomposition(&original, &prior)
            .unwrap();
        assert!(plan.repeated);
        assert_eq!(plan.generation, 1);

        let fx = Fixture::new(vec![ScriptEntry::new(
            "improve_decomposition",
            "Reasoning: add the headquarters hop\nNew Decomposition:\n1. Who invented the telephone?\n2. Which company was founded by #1?\n3. Where are the headquarters of #2?\n4. Which city is home to #3?",
        )]);
        let plan = fx
            .reasoner()
            .improve_decomposition(&original, &prior)
            .unwrap();
        assert_eq!(plan.subs.len(), 4);
        assert_eq!(
            plan.subs[2].template_text,
            "Where are the headquarters of #2?"
        );
        assert!(!plan.repeated);

        assert!(matches!(
            fx.reasoner().improve_decomposition(&original, &[]),
            Err(ModuleError::Precondition(_))
        ));
    }

    #[test]
    fn module_kind_names_round_trip() {
        for kind in ModuleKind::ALL {
            assert_eq!(kind.as_str().parse::<ModuleKind>().unwrap(), kind);
        }
        assert_eq!("QD".parse::<ModuleKind>().unwrap(), ModuleKind::Decompose);
        assert_eq!("AV".parse::<ModuleKind>().unwrap(), ModuleKind::Verify);
    }
}
