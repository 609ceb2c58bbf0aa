use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Instant;

use super::config::{ConfigError, PipelineConfig};
use crate::gateway::{Gateway, TemplateSet};
use crate::model::{
    renumber, substitute_placeholders, Attempt, CitedAnswer, DecompositionPlan, Passage,
    PipelineTrace, QARecord, Question, Route, StepTrace, SubQuestion, Verdict,
    TRACE_SCHEMA_VERSION,
};
use crate::modules::{apply_order, step_background, ModelAssignment, ModuleKind, Reasoner};
use crate::retrieval::Retriever;

/// Source of the `wall_time` recorded in traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    System,
    /// Always reports zero elapsed time, so scripted replays are byte-identical.
    Frozen,
}

/// Runs questions through the configured pipeline. Cheap to share across threads.
pub struct Engine {
    config: PipelineConfig,
    models: ModelAssignment,
    gateway: Arc<Gateway>,
    retriever: Arc<dyn Retriever>,
    templates: Arc<TemplateSet>,
    clock: Clock,
}

impl Engine {
    /// The clock is frozen when every module is scripted and real time otherwise.
    pub fn new(
        config: PipelineConfig,
        gateway: Arc<Gateway>,
        retriever: Arc<dyn Retriever>,
        templates: Arc<TemplateSet>,
    ) -> Result<Self, ConfigError> {
        config.validate()?;
        let clock = if config.all_scripted() {
            Clock::Frozen
        } else {
            Clock::System
        };
        Ok(Engine {
            models: config.models(),
            config,
            gateway,
            retriever,
            templates,
            clock,
        })
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn templates(&self) -> &Arc<TemplateSet> {
        &self.templates
    }

    fn reasoner(&self) -> Reasoner<'_> {
        Reasoner::new(&self.gateway, &self.templates, &self.models)
            .with_passage_budget(self.config.retrieval.passage_char_budget)
    }

    fn empty_trace(&self, q: &Question, route: Route) -> PipelineTrace {
        PipelineTrace {
            schema_version: TRACE_SCHEMA_VERSION,
            question: q.clone(),
            config_label: self.config.label.clone(),
            route,
            simple_path: None,
            attempts: Vec::new(),
            final_answer: CitedAnswer::abstention(),
            verified: false,
            token_usage: 0,
            approximate_tokens: false,
            calls: Vec::new(),
            module_models: ModuleKind::ALL
                .iter()
                .map(|k| {
                    (
                        k.as_str().to_string(),
                        self.models.spec_for(*k).model_name.clone(),
                    )
                })
                .collect(),
            errors: Vec::new(),
            wall_time: 0.0,
        }
    }

    fn finish(
        &self,
        mut trace: PipelineTrace,
        r: &mut Reasoner<'_>,
        started: Instant,
    ) -> PipelineTrace {
        trace.calls = r.take_calls();
        trace.recompute_tokens();
        trace.wall_time = match self.clock {
            Clock::System => started.elapsed().as_secs_f64(),
            Clock::Frozen => 0.0,
        };
        trace
    }

    /// Answers `q`: the simple pipeline first when enabled, escalating to the
    /// multi-hop pipeline with self-reflection when its answer is rejected.
    pub fn solve(&self, q: &Question) -> PipelineTrace {
        let started = Instant::now();
        let mut r = self.reasoner();
        if !self.config.enable.simple_qa {
            let mut trace = self.empty_trace(q, Route::Multihop);
            self.reflect(&mut r, q, &mut trace, None);
            return self.finish(trace, &mut r, started);
        }
        r.set_phase("simple", 0);
        let mut trace = self.empty_trace(q, Route::Simple);
        let (step, errors) = self.simple_step(&mut r, q);
        trace.errors.extend(errors);
        if step.step_verdict.accepted {
            trace.final_answer = step.record.answer.clone();
            trace.verified = true;
            trace.simple_path = Some(step);
            return self.finish(trace, &mut r, started);
        }
        trace.route = Route::SimpleEscalated;
        trace.simple_path = Some(step);
        self.reflect(&mut r, q, &mut trace, None);
        self.finish(trace, &mut r, started)
    }

    /// The simple pipeline alone: one retrieval, one answer, one verification.
    /// Never escalates; `route` is `simple` whatever the verdict.
    pub fn run_simple(&self, q: &Question) -> PipelineTrace {
        let started = Instant::now();
        let mut r = self.reasoner();
        r.set_phase("simple", 0);
        let mut trace = self.empty_trace(q, Route::Simple);
        let (step, errors) = self.simple_step(&mut r, q);
        trace.errors.extend(errors);
        trace.final_answer = step.record.answer.clone();
        trace.verified = step.step_verdict.accepted && self.config.enable.av;
        trace.simple_path = Some(step);
        self.finish(trace, &mut r, started)
    }

    /// One multi-hop attempt without reflection, optionally with a given plan.
    pub fn run_multihop(&self, q: &Question, plan: Option<DecompositionPlan>) -> PipelineTrace {
        let started = Instant::now();
        let mut r = self.reasoner();
        let mut trace = self.empty_trace(q, Route::Multihop);
        let attempt = self.attempt(&mut r, q, plan, 0);
        trace.final_answer = attempt.final_answer.clone();
        trace.verified = attempt.verdict.accepted && self.config.enable.av;
        trace.attempts.push(attempt);
        self.finish(trace, &mut r, started)
    }

    fn simple_step(&self, r: &mut Reasoner<'_>, q: &Question) -> (StepTrace, Vec<String>) {
        let mut errors = Vec::new();
        let retrieved = match self
            .retriever
            .retrieve(&q.text, self.config.retrieval.top_k)
        {
            Ok(p) => p,
            Err(e) => {
                errors.push(format!("simple retrieval: {e}"));
                Vec::new()
            }
        };
        let (mut answer, reasoning, uncited) = match r.answer(&q.text, &retrieved, "none") {
            Ok(g) => (g.answer, g.reasoning, g.uncited),
            Err(e) => {
                errors.push(format!("simple answer: {e}"));
                (CitedAnswer::abstention(), String::new(), false)
            }
        };
        let verdict = match r.verify_in_batch(&q.text, &mut answer, &retrieved) {
            Ok(v) => v,
            Err(e) => {
                errors.push(format!("simple verify: {e}"));
                Verdict::reject(format!("verification failed: {e}"))
            }
        };
        let step = StepTrace {
            step_index: 0,
            constructed_query: q.text.clone(),
            retrieval_needed: true,
            rewrites: Vec::new(),
            retrieved,
            reranked_order: Vec::new(),
            record: QARecord {
                sub_question: whole_question(q),
                reasoning,
                answer,
            },
            step_verdict: verdict,
            retries_used: 0,
            construct_fallback: false,
            uncited,
            rejected_answers: Vec::new(),
        };
        (step, errors)
    }

    /// Initial attempt plus up to `max_reflections` reflective re-runs,
    /// stopping at the first accepted final answer.
    fn reflect(
        &self,
        r: &mut Reasoner<'_>,
        q: &Question,
        trace: &mut PipelineTrace,
        plan: Option<DecompositionPlan>,
    ) {
        let max = if self.config.enable.qd && self.config.enable.av {
            self.config.max_reflections
        } else {
            0
        };
        let mut failed_plans: Vec<(DecompositionPlan, String)> = Vec::new();
        let mut next_plan = plan;
        let mut analysis_text: Option<String> = None;
        for k in 0..=max {
            let mut attempt = self.attempt(r, q, next_plan.take(), k);
            attempt.reflection_analysis = analysis_text.take();
            let accepted = attempt.verdict.accepted;
            let plan = attempt.plan.clone();
            trace.attempts.push(attempt);
            trace.final_answer = trace.attempts[trace.attempts.len() - 1]
                .final_answer
                .clone();
            trace.verified = accepted && self.config.enable.av;
            if accepted || k == max {
                break;
            }
            r.set_phase("multihop", k + 1);
            let analysis = match r.improve_analysis(q, trace) {
                Ok(a) => a,
                Err(e) => {
                    trace
                        .errors
                        .push(format!("reflection {}: improve_analysis: {e}", k + 1));
                    break;
                }
            };
            if analysis.appropriate {
                next_plan = Some(DecompositionPlan {
                    generation: k + 1,
                    repeated: false,
                    ..plan
                });
            } else {
                failed_plans.push((plan, analysis.text.clone()));
                match r.improve_decomposition(q, &failed_plans) {
                    Ok(p) => {
                        next_plan = Some(DecompositionPlan {
                            generation: k + 1,
                            ..p
                        })
                    }
                    Err(e) => {
                        trace
                            .errors
                            .push(format!("reflection {}: improve_decomposition: {e}", k + 1));
                        break;
                    }
                }
            }
            analysis_text = Some(analysis.text);
        }
    }

    fn attempt(
        &self,
        r: &mut Reasoner<'_>,
        q: &Question,
        plan: Option<DecompositionPlan>,
        k: u32,
    ) -> Attempt {
        r.set_phase("multihop", k);
        let flags = self.config.enable;
        let mut errors = Vec::new();
        let plan = match plan {
            Some(p) => p,
            None if flags.qd => match r.decompose(q) {
                Ok(p) => p,
                Err(e) => {
                    errors.push(format!("decompose: {e}"));
                    let plan = DecompositionPlan::simple(q.clone(), "", k);
                    return Attempt {
                        plan,
                        steps: Vec::new(),
                        final_answer: CitedAnswer::abstention(),
                        final_reasoning: String::new(),
                        verdict: Verdict::reject(format!("no usable decomposition: {e}")),
                        supporting_passages: Vec::new(),
                        reflection_analysis: None,
                        token_usage: r.tokens_used(),
                        errors,
                    };
                }
            },
            None => DecompositionPlan::simple(q.clone(), "", k),
        };
        let subs = if plan.is_simple() {
            vec![whole_question(q)]
        } else {
            plan.subs.clone()
        };
        let mut history: Vec<QARecord> = Vec::new();
        let mut steps: Vec<StepTrace> = Vec::new();
        let mut supporting: Vec<Passage> = Vec::new();
        for (i, sub) in subs.iter().enumerate() {
            let background = if plan.is_simple() {
                "none".to_string()
            } else {
                step_background(q, &history)
            };
            let (step, cited) =
                self.step(r, q, &history, sub, i as u32 + 1, &background, &mut errors);
            history.push(step.record.clone());
            steps.push(step);
            for p in cited {
                if !supporting.iter().any(|s| s.doc_id == p.doc_id) {
                    supporting.push(p);
                }
            }
        }
        renumber(&mut supporting);

        let (final_answer, final_reasoning) = if history.len() == 1 {
            (history[0].answer.clone(), history[0].reasoning.clone())
        } else {
            match r.finalize(q, &history) {
                Ok(out) => out,
                Err(e) => {
                    errors.push(format!("finalize: {e}"));
                    (CitedAnswer::abstention(), String::new())
                }
            }
        };
        let verdict = if flags.av {
            match r.final_verify(q, &final_answer, &supporting) {
                Ok(v) => v,
                Err(e) => {
                    errors.push(format!("final verify: {e}"));
                    Verdict::reject(format!("final verification failed: {e}"))
                }
            }
        } else {
            Verdict::accept("verification disabled")
        };
        Attempt {
            plan,
            steps,
            final_answer,
            final_reasoning,
            verdict,
            supporting_passages: supporting,
            reflection_analysis: None,
            token_usage: r.tokens_used(),
            errors,
        }
    }

    /// One sub-question: construct, decide, retrieve, rerank, answer, verify,
    /// with rewrite-and-retry on rejection. Returns the step and the passages
    /// supporting its accepted answer.
    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        r: &mut Reasoner<'_>,
        q: &Question,
        history: &[QARecord],
        sub: &SubQuestion,
        step_index: u32,
        background: &str,
        errors: &mut Vec<String>,
    ) -> (StepTrace, Vec<Passage>) {
        let flags = self.config.enable;
        let (query, construct_fallback) = if flags.qc {
            match r.construct(q, history, sub) {
                Ok(c) => (c.text, c.fallback),
                Err(e) => {
                    errors.push(format!("step {step_index} construct: {e}"));
                    (
                        substitute_placeholders(sub, history)
                            .unwrap_or_else(|_| sub.template_text.clone()),
                        true,
                    )
                }
            }
        } else {
            (
                substitute_placeholders(sub, history).unwrap_or_else(|_| sub.template_text.clone()),
                false,
            )
        };
        let retrieval_needed = if flags.rd {
            match r.decide_retrieval(&query) {
                Ok(d) => d.needed,
                Err(e) => {
                    errors.push(format!("step {step_index} decide: {e}"));
                    true
                }
            }
        } else {
            true
        };

        let mut rewrites: Vec<String> = Vec::new();
        let mut rejected_answers = Vec::new();
        let mut retries_used = 0;
        loop {
            let search = rewrites.last().map(String::as_str).unwrap_or(&query);
            let retrieved = if retrieval_needed {
                match self.retriever.retrieve(search, self.config.retrieval.top_k) {
                    Ok(p) => p,
                    Err(e) => {
                        errors.push(format!("step {step_index} retrieve: {e}"));
                        Vec::new()
                    }
                }
            } else {
                Vec::new()
            };
            let mut reranked_order = Vec::new();
            let context = if flags.pr && !retrieved.is_empty() {
                match r.rerank(&query, &retrieved) {
                    Ok(res) => {
                        reranked_order = res.order;
                        apply_order(&retrieved, &reranked_order)
                    }
                    Err(e) => {
                        errors.push(format!("step {step_index} rerank: {e}"));
                        retrieved.clone()
                    }
                }
            } else {
                retrieved.clone()
            };
            let (mut answer, reasoning, uncited) = match r.answer(&query, &context, background) {
                Ok(g) => (g.answer, g.reasoning, g.uncited),
                Err(e) => {
                    errors.push(format!("step {step_index} answer: {e}"));
                    (CitedAnswer::abstention(), String::new(), false)
                }
            };
            let verdict = if !flags.av {
                Verdict::accept("verification disabled")
            } else if !retrieval_needed && !answer.is_abstention {
                Verdict::accept("no retrieval needed; answered from background")
            } else {
                match r.verify_in_batch(&query, &mut answer, &context) {
                    Ok(v) => v,
                    Err(e) => {
                        errors.push(format!("step {step_index} verify: {e}"));
                        Verdict::reject(format!("verification failed: {e}"))
                    }
                }
            };
            let can_retry =
                flags.qr && retrieval_needed && retries_used < self.config.per_step_retries;
            if verdict.accepted || !can_retry {
                let accepted = verdict.accepted;
                let cited: Vec<Passage> = if !accepted {
                    Vec::new()
                } else if answer.citations.is_empty() {
                    context.clone()
                } else {
                    context
                        .iter()
                        .filter(|p| answer.citations.contains(&p.local_id))
                        .cloned()
                        .collect()
                };
                let recorded = if accepted {
                    answer
                } else {
                    rejected_answers.push(answer);
                    CitedAnswer::abstention()
                };
                let step = StepTrace {
                    step_index,
                    constructed_query: query.clone(),
                    retrieval_needed,
                    rewrites,
                    retrieved,
                    reranked_order,
                    record: QARecord {
                        sub_question: sub.clone().resolved(query),
                        reasoning,
                        answer: recorded,
                    },
                    step_verdict: verdict,
                    retries_used,
                    construct_fallback,
                    uncited: uncited && accepted,
                    rejected_answers,
                };
                return (step, cited);
            }
            rejected_answers.push(answer);
            retries_used += 1;
            let last = rewrites.last().cloned();
            rewrites.push(r.rewrite_query(&query, last.as_deref()));
        }
    }
}

/// The original question as the single step of an undecomposed plan.
fn whole_question(q: &Question) -> SubQuestion {
    SubQuestion {
        index: 1,
        template_text: q.text.clone(),
        resolved_text: Some(q.text.clone()),
    }
}

/// Every module whose call appears in `trace`, by template name.
pub fn modules_called(trace: &PipelineTrace) -> BTreeSet<String> {
    trace.calls.iter().map(|c| c.module.clone()).collect()
}

/// Number of calls per module in `trace`.
pub fn call_counts(trace: &PipelineTrace) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for c in &trace.calls {
        *out.entry(c.module.clone()).or_insert(0) += 1;
    }
    out
}
