//! Chat-completion client for OpenAI-compatible endpoints.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::debug;

use super::{whitespace_tokens, Completion, GatewayError, ModelSpec};

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

pub struct HttpBackend {
    client: reqwest::blocking::Client,
}

impl Default for HttpBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl HttpBackend {
    pub fn new() -> Self {
        HttpBackend {
            client: reqwest::blocking::Client::new(),
        }
    }

    pub fn complete(&self, spec: &ModelSpec, prompt: &str) -> Result<Completion, GatewayError> {
        let endpoint = spec
            .endpoint
            .as_deref()
            .ok_or_else(|| GatewayError::Config("http backend without endpoint".into()))?;
        let body = ChatRequest {
            model: &spec.model_name,
            messages: vec![ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: spec.temperature,
            max_tokens: spec.max_output_tokens,
        };
        let mut request = self
            .client
            .post(endpoint)
            .timeout(Duration::from_secs_f64(spec.timeout_secs))
            .json(&body);
        if let Some(var) = &spec.api_key_env {
            let key = std::env::var(var).map_err(|_| {
                GatewayError::Config(format!("environment variable {var} is not set"))
            })?;
            request = request.bearer_auth(key);
        }

        let response = request.send().map_err(|e| {
            if e.is_timeout() || e.is_connect() {
                GatewayError::BackendTimeout(e.to_string())
            } else {
                GatewayError::Transport(e.to_string())
            }
        })?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(GatewayError::BackendRejected {
                status: status.as_u16(),
                body: body.chars().take(500).collect(),
            });
        }
        let parsed: ChatResponse = response.json().map_err(|e| {
            if e.is_timeout() {
                GatewayError::BackendTimeout(e.to_string())
            } else {
                GatewayError::MalformedResponse(e.to_string())
            }
        })?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| {
                GatewayError::MalformedResponse("no message content in first choice".into())
            })?;

        let (prompt_tokens, completion_tokens) = parsed
            .usage
            .map(|u| (u.prompt_tokens, u.completion_tokens))
            .unwrap_or((None, None));
        let approximate = prompt_tokens.is_none() || completion_tokens.is_none();
        debug!(model = %spec.model_name, approximate, "chat completion");
        Ok(Completion {
            prompt_tokens: prompt_tokens.unwrap_or_else(|| whitespace_tokens(prompt)),
            completion_tokens: completion_tokens.unwrap_or_else(|| whitespace_tokens(&text)),
            text,
            approximate,
        })
    }
}
