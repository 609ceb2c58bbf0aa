//! Corpus ingestion, a local lexical retriever, and a remote retrieval client.

mod bm25;
mod remote;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bm25::{ingest, read_corpus, tokenize, Bm25Index, CorpusChunk, DEFAULT_B, DEFAULT_K1};
pub use remote::RemoteRetriever;

use crate::model::Passage;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RetrievalError {
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("corpus line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("duplicate doc_id '{0}'")]
    DuplicateDocId(String),
    #[error("the index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("index file: {0}")]
    Index(String),
    #[error("remote retriever: {0}")]
    Remote(String),
    #[error("retriever configuration: {0}")]
    Config(String),
}

impl RetrievalError {
    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        RetrievalError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        }
    }
}

/// Source of ranked passages. Implementations must be deterministic for a
/// fixed corpus and safe to call concurrently.
pub trait Retriever: Send + Sync {
    /// Top `k` passages for `query`, local ids 1..=n in rank order.
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<Passage>, RetrievalError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrieverKind {
    LocalLexical,
    Remote,
}

fn default_top_k() -> usize {
    10
}

fn default_timeout() -> f64 {
    30.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieverConfig {
    pub kind: RetrieverKind,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remote_endpoint: Option<String>,
    /// Persisted index for the local retriever.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index_path: Option<PathBuf>,
    /// Character budget for passage text shown in one prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub passage_char_budget: Option<usize>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        RetrieverConfig {
            kind: RetrieverKind::LocalLexical,
            top_k: default_top_k(),
            remote_endpoint: None,
            index_path: None,
            passage_char_budget: None,
            timeout_secs: default_timeout(),
        }
    }
}

impl RetrieverConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.top_k == 0 {
            return Err(RetrievalError::Config("top_k must be at least 1".into()));
        }
        match (self.kind, &self.remote_endpoint) {
            (RetrieverKind::Remote, None) => Err(RetrievalError::Config(
                "remote retriever needs remote_endpoint".into(),
            )),
            (RetrieverKind::LocalLexical, Some(_)) => Err(RetrievalError::Config(
                "remote_endpoint is only valid for the remote retriever".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Opens the retriever this configuration describes.
    pub fn open(&self) -> Result<Box<dyn Retriever>, RetrievalError> {
        self.validate()?;
        match self.kind {
            RetrieverKind::LocalLexical => {
                let path = self.index_path.as_deref().ok_or_else(|| {
                    RetrievalError::Config("local retriever needs index_path".into())
                })?;
                Ok(Box::new(Bm25Index::load(path)?))
            }
            RetrieverKind::Remote => Ok(Box::new(RemoteRetriever::new(
                self.remote_endpoint.clone().unwrap_or_default(),
                self.timeout_secs,
            ))),
        }
    }
}

/// Shortens passage texts so their combined length fits `budget` characters.
///
/// The longest texts are cut first: every text is capped at the largest
/// common length that fits, so shorter passages stay whole.
pub fn truncate_passages(passages: &[Passage], budget: usize) -> Vec<Passage> {
    let lengths: Vec<usize> = passages.iter().map(|p| p.text.chars().count()).collect();
    let total: usize = lengths.iter().sum();
    if total <= budget {
        return passages.to_vec();
    }
    let fits = |cap: usize| lengths.iter().map(|&l| l.min(cap)).sum::<usize>() <= budget;
    let (mut lo, mut hi) = (0usize, lengths.iter().copied().max().unwrap_or(0));
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    passages
        .iter()
        .map(|p| Passage {
            text: p.text.chars().take(lo).collect(),
            ..p.clone()
        })
        .collect()
}
