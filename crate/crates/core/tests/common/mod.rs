#![allow(dead_code)]

use std::sync::Arc;

use hoprag_core::gateway::{Gateway, Script, ScriptEntry, TemplateSet};
use hoprag_core::model::Question;
use hoprag_core::orchestrator::{Engine, PipelineConfig};
use hoprag_core::retrieval::{Bm25Index, CorpusChunk, Retriever};

pub const IPHONE_Q: &str = "Who is the CEO of the company owns the brand that produces iPhones?";
pub const IPHONE_SUB1: &str = "What is the company owns the brand that produces iPhones?";
pub const IPHONE_SUB2: &str = "Who is the CEO of #1?";
pub const IPHONE_REASONING: &str = "To answer this question, it is necessary to identify the company associated with the brand producing iPhones first. Once the company is determined, its CEO can be identified. This logical dependency makes decomposition necessary.";

pub fn chunk(doc_id: &str, title: &str, text: &str) -> CorpusChunk {
    CorpusChunk {
        doc_id: doc_id.into(),
        title: title.into(),
        text: text.into(),
    }
}

pub fn iphone_corpus() -> Bm25Index {
    Bm25Index::build(vec![
        chunk("apple-1", "Apple Inc.", "Apple Inc. designs and sells the iPhone, a line of smartphones. The iPhone brand is owned by Apple Inc."),
        chunk("apple-2", "Tim Cook", "Tim Cook is the chief executive officer (CEO) of Apple Inc. He succeeded Steve Jobs in 2011."),
        chunk("samsung-1", "Samsung", "Samsung produces Galaxy smartphones. Its CEO has changed several times."),
        chunk("nokia-1", "Nokia", "Nokia was once the largest producer of mobile phones in the world."),
        chunk("canada-1", "Canada", "Canada has a population of about 38 million people."),
        chunk("australia-1", "Australia", "Australia has a population of about 26 million people."),
    ])
    .unwrap()
}

/// Local id of `doc_id` in the batch retrieved for `query`.
pub fn local_id(index: &dyn Retriever, query: &str, doc_id: &str) -> u32 {
    index
        .retrieve(query, 10)
        .unwrap()
        .into_iter()
        .find(|p| p.doc_id == doc_id)
        .unwrap_or_else(|| panic!("{doc_id} not retrieved for {query:?}"))
        .local_id
}

pub fn decompose(listing: &[&str]) -> String {
    if listing.is_empty() {
        return "Reasoning: The question asks for a direct fact.\nOutput: None".into();
    }
    format!(
        "Reasoning: The question needs several hops.\nOutput:\n{}",
        numbered(listing)
    )
}

pub fn numbered(listing: &[&str]) -> String {
    listing
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {s}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn decide(needed: bool) -> String {
    format!("Analysis: Deciding whether retrieval helps.\nOutput: {needed}")
}

pub fn construct(text: &str) -> String {
    format!("Rewritten Question: {text}")
}

pub fn rewrite(text: &str) -> String {
    format!("New Query: {text}")
}

pub fn rerank(line: &str) -> String {
    format!("Reasoning: Most relevant first.\nOutput: {line}")
}

pub fn answer(text: &str) -> String {
    format!("Reasoning: Based on the passages.\nOutput: {text}")
}

pub fn verify(ok: bool) -> String {
    format!("Reason: Checked against the source.\nOutput: {ok}")
}

pub fn finalize(text: &str) -> String {
    format!("Reasoning: Combining the sub-answers.\nAnswer: {text}")
}

pub fn analysis(text: &str) -> String {
    format!("Analysis: {text}")
}

pub fn improve(listing: &[&str]) -> String {
    format!(
        "Reasoning: A different chain of hops.\nNew Decomposition:\n{}",
        numbered(listing)
    )
}

pub fn judge(ok: bool) -> String {
    format!("Reasoning: Comparing meanings.\nOutput: {ok}")
}

pub fn e(module: &str, response: impl Into<String>) -> ScriptEntry {
    ScriptEntry::new(module, response)
}

/// The full two-hop run for the iPhone question under the default
/// configuration: the simple path abstains and the question escalates.
pub fn golden_script(index: &Bm25Index) -> Script {
    let sub2 = "Who is the CEO of Apple Inc.?";
    let apple = local_id(index, IPHONE_SUB1, "apple-1");
    let cook = local_id(index, sub2, "apple-2");
    Script::new(vec![
        e("answer", answer("I don't know.")),
        e(
            "decompose",
            format!("Reasoning: {IPHONE_REASONING}\nOutput:\n1. {IPHONE_SUB1}\n2. {IPHONE_SUB2}"),
        ),
        e("decide", decide(true)),
        e("rerank", rerank(&format!("[{apple}]"))),
        e("answer", answer(&format!("Apple Inc. [{apple}]"))),
        e("verify", verify(true)),
        e("construct", construct(sub2)),
        e("decide", decide(true)),
        e("rerank", rerank(&format!("[{cook}]"))),
        e(
            "answer",
            answer(&format!("Tim Cook is the CEO of Apple Inc. [{cook}]")),
        ),
        e("verify", verify(true)),
        e("finalize", finalize("Tim Cook")),
        e("final_verify", verify(true)),
    ])
}

pub fn engine(cfg: PipelineConfig, script: Script, retriever: Arc<dyn Retriever>) -> Engine {
    Engine::new(
        cfg,
        Arc::new(Gateway::with_script(script)),
        retriever,
        Arc::new(TemplateSet::builtin()),
    )
    .unwrap()
}

pub fn question(id: &str, text: &str) -> Question {
    Question::new(id, text).unwrap()
}

pub fn config(edit: impl FnOnce(&mut PipelineConfig)) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    edit(&mut cfg);
    cfg
}

/// Two-step plan whose final verdicts follow `final_verdicts`; reflection
/// always proposes the same alternative plan.
pub fn reflection_script(final_verdicts: &[bool]) -> Script {
    let mut s = Script::new(vec![
        e(
            "decompose",
            decompose(&["Which company makes iPhones?", "Who leads #1?"]),
        ),
        e("decide", decide(true)).repeating(),
        e("rerank", rerank("[1]")).repeating(),
        e("answer", answer("Apple Inc. [1]")).repeating(),
        e("verify", verify(true)).repeating(),
        e("construct", construct("Who leads Apple Inc.?")).repeating(),
        e("finalize", finalize("Tim Cook")).repeating(),
        e(
            "improve_analysis",
            analysis("- Ask for the CEO explicitly."),
        )
        .repeating(),
        e(
            "improve_decomposition",
            improve(&[
                "Which company owns the iPhone brand?",
                "Who is the CEO of #1?",
            ]),
        )
        .repeating(),
    ]);
    for &v in final_verdicts {
        s.push(e("final_verify", verify(v)));
    }
    s
}

pub const CITIES: [&str; 20] = [
    "Aldoria", "Brevik", "Calvera", "Dunmore", "Eskaton", "Farrow", "Galdin", "Hesper", "Ivrea",
    "Jorvik", "Kestrel", "Lumen", "Marrow", "Norvale", "Ostrava", "Pellin", "Quarry", "Rosmer",
    "Sable", "Tamsin",
];

/// Twenty "capital of country N" questions over a matching corpus. Even
/// questions are answered correctly on the simple path; odd ones get a wrong
/// answer that verification rejects, so they escalate.
pub fn ablation_fixture() -> (Bm25Index, Vec<Question>, Script) {
    let chunks = CITIES
        .iter()
        .enumerate()
        .map(|(n, city)| {
            chunk(
                &format!("country-{n:02}"),
                &format!("Country {n}"),
                &format!("The capital of country {n} is {city}. It is a large city."),
            )
        })
        .collect();
    let index = Bm25Index::build(chunks).unwrap();
    let questions = CITIES
        .iter()
        .enumerate()
        .map(|(n, city)| {
            question(
                &format!("q{n:02}"),
                &format!("What is the capital of country {n}?"),
            )
            .with_gold(vec![city.to_string()])
            .unwrap()
        })
        .collect();
    let mut entries = Vec::new();
    for (n, city) in CITIES.iter().enumerate() {
        let text = if n % 2 == 0 {
            format!("The capital is {city} [1].")
        } else {
            "It is Unknown Town [1].".to_string()
        };
        entries.push(
            e("answer", answer(&text))
                .containing(format!("country {n}?"))
                .repeating(),
        );
    }
    entries.extend([
        e("answer", answer("I don't know.")).repeating(),
        e("verify", verify(false))
            .containing("Unknown Town")
            .repeating(),
        e("verify", verify(true)).repeating(),
        e("final_verify", verify(false))
            .containing("Unknown Town")
            .repeating(),
        e("final_verify", verify(true)).repeating(),
        e("decompose", decompose(&[])).repeating(),
        e("decide", decide(true)).repeating(),
        e("rerank", rerank("[1] > [2]")).repeating(),
        e("rewrite", rewrite("capital city of the country")).repeating(),
        e(
            "improve_analysis",
            analysis("- Identify the country first."),
        )
        .repeating(),
        e(
            "improve_decomposition",
            improve(&["Which country is meant?", "What is the capital of #1?"]),
        )
        .repeating(),
        e(
            "construct",
            construct("What is the capital of that country?"),
        )
        .repeating(),
        e("finalize", finalize("I don't know.")).repeating(),
        e("evaluate", judge(false))
            .containing("Our Answer: I don't know.")
            .repeating(),
        e("evaluate", judge(false))
            .containing("Unknown Town")
            .repeating(),
        e("evaluate", judge(true)).repeating(),
    ]);
    (index, questions, Script::new(entries))
}
