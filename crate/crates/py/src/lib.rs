//! Python bindings: metrics, parsing helpers, the BM25 index, and a scripted
//! `solve` that returns the trace as JSON.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use hoprag_core::evaluation;
use hoprag_core::gateway::{self, Gateway, Script, TemplateSet};
use hoprag_core::model::{self, CitedAnswer, QARecord, Question, SubQuestion};
use hoprag_core::modules;
use hoprag_core::orchestrator::{Engine, PipelineConfig};
use hoprag_core::retrieval::{self, CorpusChunk, Retriever};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(hoprag, HopragError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    HopragError::new_err(e.to_string())
}

/// Lowercases, strips punctuation, and splits on whitespace.
#[pyfunction]
fn normalize(text: &str) -> Vec<String> {
    evaluation::normalize(text)
}

/// 1 if some normalized gold answer occurs as a contiguous token run of the
/// normalized prediction, else 0.
#[pyfunction]
fn cover_em(prediction: &str, golds: Vec<String>) -> PyResult<u8> {
    evaluation::cover_em(prediction, &golds).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn answer_dict<'py>(py: Python<'py>, a: &CitedAnswer) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("text", &a.text)?;
    d.set_item(
        "citations",
        a.citations.iter().copied().collect::<Vec<u32>>(),
    )?;
    d.set_item("is_abstention", a.is_abstention)?;
    Ok(d)
}

/// Returns `{"text", "citations", "is_abstention"}` for a raw answer.
#[pyfunction]
fn extract_citations<'py>(py: Python<'py>, raw_answer: &str) -> PyResult<Bound<'py, PyDict>> {
    answer_dict(py, &model::extract_citations(raw_answer))
}

#[pyfunction]
fn parse_fields(text: &str, labels: Vec<String>) -> PyResult<BTreeMap<String, String>> {
    if labels.is_empty() {
        return Err(PyValueError::new_err("labels must not be empty"));
    }
    gateway::parse_fields(text, &labels).map_err(err)
}

/// Repairs a `[a] > [b] > ...` ranking line against the batch ids.
#[pyfunction]
fn repair_ranking(line: &str, batch: Vec<u32>) -> Vec<u32> {
    modules::repair_ranking(line, &batch).order
}

/// Fills `#k` placeholders from `answers`, where `answers[k-1]` answers step k.
#[pyfunction]
fn substitute_placeholders(template: &str, answers: Vec<String>) -> PyResult<String> {
    let index = answers.len() as u32 + 1;
    let sub =
        SubQuestion::new(index, template).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let history = answers
        .iter()
        .enumerate()
        .map(|(i, text)| {
            let step = SubQuestion::new(i as u32 + 1, format!("step {}", i + 1)).map_err(err)?;
            Ok(QARecord {
                sub_question: step,
                reasoning: String::new(),
                answer: model::extract_citations(text),
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    model::substitute_placeholders(&sub, &history).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// In-memory BM25 index (k1 = 1.2, b = 0.75).
#[pyclass(name = "Bm25Index", module = "hoprag", frozen)]
struct PyBm25Index {
    inner: Arc<retrieval::Bm25Index>,
}

#[pymethods]
impl PyBm25Index {
    /// Builds an index from `(doc_id, title, text)` tuples.
    #[new]
    fn new(chunks: Vec<(String, String, String)>) -> PyResult<Self> {
        let chunks = chunks
            .into_iter()
            .map(|(doc_id, title, text)| CorpusChunk {
                doc_id,
                title,
                text,
            })
            .collect();
        Ok(PyBm25Index {
            inner: Arc::new(retrieval::Bm25Index::build(chunks).map_err(err)?),
        })
    }

    /// Reads a JSONL corpus, persists the index at `index_path`, and returns it.
    #[staticmethod]
    fn ingest(corpus: PathBuf, index_path: PathBuf) -> PyResult<Self> {
        let (index, _) = retrieval::ingest(&corpus, &index_path).map_err(err)?;
        Ok(PyBm25Index {
            inner: Arc::new(index),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyBm25Index {
            inner: Arc::new(retrieval::Bm25Index::load(&path).map_err(err)?),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    /// Top-k passages as dicts with `local_id`, `doc_id`, `title`, `text`, `score`.
    #[pyo3(signature = (query, k = 10))]
    fn retrieve<'py>(
        &self,
        py: Python<'py>,
        query: &str,
        k: usize,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let passages = self.inner.retrieve(query, k).map_err(err)?;
        passages
            .iter()
            .map(|p| {
                let d = PyDict::new(py);
                d.set_item("local_id", p.local_id)?;
                d.set_item("doc_id", &p.doc_id)?;
                d.set_item("title", &p.title)?;
                d.set_item("text", &p.text)?;
                d.set_item("score", p.score)?;
                Ok(d)
            })
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Answers `question` against `index` and returns the trace as JSON.
///
/// `script_json` feeds the scripted backend; `config_toml` defaults to the
/// built-in configuration.
#[pyfunction]
#[pyo3(signature = (question, index, script_json = None, config_toml = None, question_id = "q"))]
fn solve(
    py: Python<'_>,
    question: &str,
    index: &PyBm25Index,
    script_json: Option<&str>,
    config_toml: Option<&str>,
    question_id: &str,
) -> PyResult<String> {
    let cfg = match config_toml {
        Some(text) => PipelineConfig::from_toml(text).map_err(err)?,
        None => PipelineConfig::default(),
    };
    let gateway = match script_json {
        Some(text) => Gateway::with_script(Script::from_json(text).map_err(err)?),
        None => Gateway::new(),
    };
    let q =
        Question::new(question_id, question).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let retriever: Arc<dyn Retriever> = index.inner.clone();
    let engine = Engine::new(
        cfg,
        Arc::new(gateway),
        retriever,
        Arc::new(TemplateSet::builtin()),
    )
    .map_err(err)?;
    Ok(py.detach(|| engine.solve(&q).to_json()))
}

#[pymodule]
#[pyo3(name = "hoprag")]
pub fn hoprag_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("HopragError", m.py().get_type::<HopragError>())?;
    m.add("ABSTENTION", model::ABSTENTION)?;
    m.add("TRACE_SCHEMA_VERSION", model::TRACE_SCHEMA_VERSION)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(cover_em, m)?)?;
    m.add_function(wrap_pyfunction!(extract_citations, m)?)?;
    m.add_function(wrap_pyfunction!(parse_fields, m)?)?;
    m.add_function(wrap_pyfunction!(repair_ranking, m)?)?;
    m.add_function(wrap_pyfunction!(substitute_placeholders, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_class::<PyBm25Index>()?;
    Ok(())
}
