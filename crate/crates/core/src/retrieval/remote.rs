use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{RetrievalError, Retriever};
use crate::model::Passage;

#[derive(Serialize)]
struct SearchRequest<'a> {
    query: &'a str,
    k: usize,
}

#[derive(Deserialize)]
struct SearchResponse {
    passages: Vec<RemotePassage>,
}

#[derive(Deserialize)]
struct RemotePassage {
    doc_id: String,
    #[serde(default)]
    title: String,
    text: String,
    #[serde(default)]
    score: f64,
}

/// Client for a retrieval service speaking `POST {query, k}` →
/// `{passages: [{doc_id, title, text, score}]}`.
pub struct RemoteRetriever {
    endpoint: String,
    timeout: Duration,
    client: reqwest::blocking::Client,
}

impl RemoteRetriever {
    pub fn new(endpoint: impl Into<String>, timeout_secs: f64) -> Self {
        RemoteRetriever {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs_f64(timeout_secs),
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl Retriever for RemoteRetriever {
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<Passage>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        let response = self
            .client
            .post(&self.endpoint)
            .timeout(self.timeout)
            .json(&SearchRequest { query, k })
            .send()
            .map_err(|e| RetrievalError::Remote(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(RetrievalError::Remote(format!("status {status}")));
        }
        let body: SearchResponse = response
            .json()
            .map_err(|e| RetrievalError::Remote(format!("bad response body: {e}")))?;
        Ok(body
            .passages
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(i, p)| Passage {
                local_id: i as u32 + 1,
                doc_id: p.doc_id,
                title: p.title,
                text: p.text,
                score: p.score,
            })
            .collect())
    }
}
