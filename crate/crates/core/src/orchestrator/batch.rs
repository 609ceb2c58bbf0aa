use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Deserialize;
use thiserror::Error;

use super::pipeline::Engine;
use crate::evaluation::normalize;
use crate::model::{PipelineTrace, Question};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DataError {
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("dataset line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("duplicate question id '{0}'")]
    DuplicateId(String),
    #[error("dataset is empty")]
    Empty,
}

#[derive(Deserialize)]
struct DatasetLine {
    id: serde_json::Value,
    question: String,
    answers: Vec<String>,
}

/// Reads a JSONL dataset of `{id, question, answers: [...]}` objects.
/// Every question needs at least one answer that survives normalization.
pub fn read_dataset(path: &Path) -> Result<Vec<Question>, DataError> {
    let io = |e: std::io::Error| DataError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let file = fs::File::open(path).map_err(io)?;
    let mut out: Vec<Question> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| DataError::MalformedLine {
            line: i + 1,
            reason,
        };
        let raw: DatasetLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let id = match raw.id {
            serde_json::Value::String(s) => s,
            serde_json::Value::Number(n) => n.to_string(),
            other => return Err(bad(format!("id must be a string or number, got {other}"))),
        };
        if let Some(g) = raw.answers.iter().find(|g| normalize(g).is_empty()) {
            return Err(bad(format!("answer {g:?} is empty after normalization")));
        }
        let q = Question::new(id, raw.question)
            .and_then(|q| q.with_gold(raw.answers))
            .map_err(|e| bad(e.to_string()))?;
        if out.iter().any(|o| o.id == q.id) {
            return Err(DataError::DuplicateId(q.id));
        }
        out.push(q);
    }
    if out.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(out)
}

/// Writes one pretty JSON file per trace; writes are serialized so
/// concurrent workers never interleave.
pub struct TraceSink {
    dir: PathBuf,
    lock: Mutex<()>,
}

impl TraceSink {
    pub fn create(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(TraceSink {
            dir: dir.to_path_buf(),
            lock: Mutex::new(()),
        })
    }

    pub fn path_for(&self, question_id: &str) -> PathBuf {
        let safe: String = question_id
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        self.dir.join(format!("{safe}.json"))
    }

    pub fn write(&self, trace: &PipelineTrace) -> std::io::Result<PathBuf> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let path = self.path_for(&trace.question.id);
        fs::write(&path, trace.to_json())?;
        Ok(path)
    }
}

/// Solves every question with at most `parallel` workers. Results come back
/// in input order regardless of completion order.
pub fn run_batch(
    engine: &Engine,
    questions: &[Question],
    parallel: usize,
    sink: Option<&TraceSink>,
) -> Result<Vec<PipelineTrace>, std::io::Error> {
    let workers = parallel.clamp(1, questions.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<PipelineTrace>>> =
        questions.iter().map(|_| Mutex::new(None)).collect();
    let failure: Mutex<Option<std::io::Error>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= questions.len() {
                    break;
                }
                let trace = engine.solve(&questions[i]);
                if let Some(sink) = sink {
                    if let Err(e) = sink.write(&trace) {
                        failure.lock().unwrap().get_or_insert(e);
                    }
                }
                *slots[i].lock().unwrap() = Some(trace);
            });
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    Ok(slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every question was solved"))
        .collect())
}
