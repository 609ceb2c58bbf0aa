//! Okapi BM25 over an in-memory inverted index.
//!
//! score(d, q) = Σ_{t ∈ unique(q)} idf(t) · tf·(k1+1) / (tf + k1·(1 − b + b·|d|/avgdl))
//! idf(t)      = ln(1 + (N − df + 0.5) / (df + 0.5))
//!
//! The `1 +` inside the log keeps idf positive for terms in most documents.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RetrievalError, Retriever};
use crate::model::Passage;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusChunk {
    pub doc_id: String,
    pub title: String,
    pub text: String,
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn chunk_terms(chunk: &CorpusChunk) -> Vec<String> {
    let mut terms = tokenize(&chunk.title);
    terms.extend(tokenize(&chunk.text));
    terms
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Posting {
    doc: u32,
    tf: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bm25Index {
    k1: f64,
    b: f64,
    chunks: Vec<CorpusChunk>,
    doc_lengths: Vec<u32>,
    avg_doc_len: f64,
    postings: BTreeMap<String, Vec<Posting>>,
}

impl Bm25Index {
    pub fn build(chunks: Vec<CorpusChunk>) -> Result<Self, RetrievalError> {
        Self::with_params(chunks, DEFAULT_K1, DEFAULT_B)
    }

    pub fn with_params(chunks: Vec<CorpusChunk>, k1: f64, b: f64) -> Result<Self, RetrievalError> {
        let mut seen = HashSet::new();
        for c in &chunks {
            if !seen.insert(c.doc_id.as_str()) {
                return Err(RetrievalError::DuplicateDocId(c.doc_id.clone()));
            }
        }
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(chunks.len());
        for (doc, chunk) in chunks.iter().enumerate() {
            let terms = chunk_terms(chunk);
            doc_lengths.push(terms.len() as u32);
            let mut counts: BTreeMap<String, u32> = BTreeMap::new();
            for t in terms {
                *counts.entry(t).or_default() += 1;
            }
            for (term, tf) in counts {
                postings.entry(term).or_default().push(Posting {
                    doc: doc as u32,
                    tf,
                });
            }
        }
        let total: u64 = doc_lengths.iter().map(|&l| u64::from(l)).sum();
        let avg_doc_len = if chunks.is_empty() {
            0.0
        } else {
            total as f64 / chunks.len() as f64
        };
        Ok(Bm25Index {
            k1,
            b,
            chunks,
            doc_lengths,
            avg_doc_len,
            postings,
        })
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// `(chunk index, score)` for every chunk sharing a term with the query,
    /// best first, ties by doc_id.
    pub fn score_all(&self, query: &str) -> Vec<(usize, f64)> {
        let n = self.chunks.len() as f64;
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        let mut scores: BTreeMap<usize, f64> = BTreeMap::new();
        for term in &terms {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let df = list.len() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            for p in list {
                let dl = f64::from(self.doc_lengths[p.doc as usize]);
                let tf = f64::from(p.tf);
                let norm = self.k1 * (1.0 - self.b + self.b * dl / self.avg_doc_len);
                *scores.entry(p.doc as usize).or_default() +=
                    idf * tf * (self.k1 + 1.0) / (tf + norm);
            }
        }
        let mut ranked: Vec<(usize, f64)> = scores.into_iter().collect();
        ranked.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.chunks[a.0].doc_id.cmp(&self.chunks[b.0].doc_id))
        });
        ranked
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| RetrievalError::io(&tmp, e))?;
            serde_json::to_writer(&mut f, self)
                .map_err(|e| RetrievalError::Index(e.to_string()))?;
            f.flush().map_err(|e| RetrievalError::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| RetrievalError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let f = fs::File::open(path).map_err(|e| RetrievalError::io(path, e))?;
        serde_json::from_reader(BufReader::new(f)).map_err(|e| RetrievalError::Index(e.to_string()))
    }
}

impl Retriever for Bm25Index {
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<Passage>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        if self.chunks.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        Ok(self
            .score_all(query)
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(rank, (doc, score))| {
                let chunk = &self.chunks[doc];
                Passage {
                    local_id: rank as u32 + 1,
                    doc_id: chunk.doc_id.clone(),
                    title: chunk.title.clone(),
                    text: chunk.text.clone(),
                    score,
                }
            })
            .collect())
    }
}

#[derive(Deserialize)]
struct RawChunk {
    doc_id: Option<serde_json::Value>,
    title: Option<String>,
    text: Option<String>,
}

/// Reads corpus JSONL: one `{doc_id, title, text}` object per line.
/// Blank lines are skipped; line numbers in errors are 1-based.
pub fn read_corpus(path: &Path) -> Result<Vec<CorpusChunk>, RetrievalError> {
    let f = fs::File::open(path).map_err(|e| RetrievalError::io(path, e))?;
    let mut chunks = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| RetrievalError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| RetrievalError::MalformedLine {
            line: lineno,
            reason,
        };
        let raw: RawChunk = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let doc_id = match raw.doc_id {
            Some(serde_json::Value::String(s)) if !s.is_empty() => s,
            Some(serde_json::Value::Number(n)) => n.to_string(),
            _ => return Err(malformed("missing or empty \"doc_id\"".into())),
        };
        let text = raw
            .text
            .ok_or_else(|| malformed("missing \"text\"".into()))?;
        if text.trim().is_empty() {
            return Err(malformed("empty \"text\"".into()));
        }
        if !seen.insert(doc_id.clone()) {
            return Err(RetrievalError::DuplicateDocId(doc_id));
        }
        chunks.push(CorpusChunk {
            doc_id,
            title: raw.title.unwrap_or_default(),
            text,
        });
    }
    Ok(chunks)
}

/// Builds an index from a corpus file and persists it at `index_path`,
/// replacing any earlier index there.
pub fn ingest(corpus: &Path, index_path: &Path) -> Result<(Bm25Index, usize), RetrievalError> {
    let chunks = read_corpus(corpus)?;
    let index = Bm25Index::build(chunks)?;
    index.save(index_path)?;
    let count = index.len();
    Ok((index, count))
}
