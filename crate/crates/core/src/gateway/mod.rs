//! Uniform access to chat-completion backends.

mod http;
mod scripted;
pub mod template;

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpBackend;
pub use scripted::{Script, ScriptEntry, ScriptedBackend};
pub use template::{parse_fields, PromptTemplate, TemplateError, TemplateSet};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("backend timed out or was unreachable: {0}")]
    BackendTimeout(String),
    #[error("backend rejected the request with status {status}: {body}")]
    BackendRejected { status: u16, body: String },
    #[error("script has no response left for module '{module}'")]
    ScriptExhausted { module: String },
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("model configuration: {0}")]
    Config(String),
    #[error("script: {0}")]
    Script(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Scripted,
    Http,
}

fn default_max_output_tokens() -> u32 {
    1024
}

fn default_timeout() -> f64 {
    60.0
}

/// Which model answers a module's prompts, and how to reach it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub backend: BackendKind,
    pub model_name: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    /// Name of the environment variable holding the API key (never the key).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
}

impl ModelSpec {
    pub fn scripted(model_name: impl Into<String>) -> Self {
        ModelSpec {
            backend: BackendKind::Scripted,
            model_name: model_name.into(),
            temperature: 0.0,
            max_output_tokens: default_max_output_tokens(),
            endpoint: None,
            timeout_secs: default_timeout(),
            api_key_env: None,
        }
    }

    pub fn http(model_name: impl Into<String>, endpoint: impl Into<String>) -> Self {
        ModelSpec {
            backend: BackendKind::Http,
            endpoint: Some(endpoint.into()),
            ..Self::scripted(model_name)
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.model_name.trim().is_empty() {
            return Err(GatewayError::Config("model_name is empty".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::Config("temperature must be >= 0".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::Config("max_output_tokens must be > 0".into()));
        }
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(GatewayError::Config("timeout_secs must be > 0".into()));
        }
        match (self.backend, &self.endpoint) {
            (BackendKind::Http, None) => Err(GatewayError::Config(format!(
                "model '{}' uses the http backend but has no endpoint",
                self.model_name
            ))),
            (BackendKind::Scripted, Some(_)) => Err(GatewayError::Config(format!(
                "model '{}' is scripted but sets an endpoint",
                self.model_name
            ))),
            _ => Ok(()),
        }
    }

    /// How many extra attempts a module gets when the output does not parse.
    /// Live backends get one reminder retry; scripted replies never change.
    pub fn format_retries(&self) -> u32 {
        match self.backend {
            BackendKind::Http => 1,
            BackendKind::Scripted => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Token counts were estimated by whitespace splitting.
    pub approximate: bool,
}

pub fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Dispatches completions to the scripted or HTTP backend named by the spec.
///
/// Safe to share across threads; the scripted queue is locked per call.
#[derive(Default)]
pub struct Gateway {
    scripted: Option<ScriptedBackend>,
    http: OnceLock<HttpBackend>,
}

impl Gateway {
    /// A gateway with no script; scripted specs fail with `ScriptExhausted`.
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_script(script: Script) -> Self {
        Gateway {
            scripted: Some(ScriptedBackend::new(script)),
            http: OnceLock::new(),
        }
    }

    pub fn complete(&self, spec: &ModelSpec, prompt: &str) -> Result<Completion, GatewayError> {
        self.complete_for(spec, "", prompt)
    }

    /// Like [`complete`](Self::complete), tagging the call with the module
    /// name that scripted entries can match on.
    pub fn complete_for(
        &self,
        spec: &ModelSpec,
        module: &str,
        prompt: &str,
    ) -> Result<Completion, GatewayError> {
        if prompt.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        match spec.backend {
            BackendKind::Scripted => match &self.scripted {
                Some(backend) => backend.complete(module, &spec.model_name, prompt),
                None => Err(GatewayError::ScriptExhausted {
                    module: module.to_string(),
                }),
            },
            BackendKind::Http => self
                .http
                .get_or_init(HttpBackend::new)
                .complete(spec, prompt),
        }
    }

    pub fn script_remaining(&self) -> Option<usize> {
        self.scripted.as_ref().map(ScriptedBackend::remaining)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_echo() {
        let gw = Gateway::with_script(Script::new(vec![ScriptEntry {
            module: None,
            ..ScriptEntry::new("", "Output: true")
        }]));
        let c = gw
            .complete(&ModelSpec::scripted("m"), "any prompt")
            .unwrap();
        assert_eq!(c.text, "Output: true");
    }

    #[test]
    fn scripted_empty_queue() {
        let gw = Gateway::with_script(Script::default());
        assert!(matches!(
            gw.complete(&ModelSpec::scripted("m"), "p"),
            Err(GatewayError::ScriptExhausted { .. })
        ));
    }

    #[test]
    fn empty_prompt_rejected() {
        let gw = Gateway::with_script(Script::default());
        assert_eq!(
            gw.complete(&ModelSpec::scripted("m"), "  "),
            Err(GatewayError::EmptyPrompt)
        );
    }

    #[test]
    fn unreachable_endpoint_times_out() {
        // port 9 (discard) on localhost is closed in the sandbox
        let mut spec = ModelSpec::http("m", "http://127.0.0.1:9/v1/chat/completions");
        spec.timeout_secs = 2.0;
        let err = Gateway::new().complete(&spec, "hello").unwrap_err();
        assert!(matches!(err, GatewayError::BackendTimeout(_)), "{err:?}");
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::scripted("m").validate().is_ok());
        let mut http = ModelSpec::http("m", "http://x");
        assert!(http.validate().is_ok());
        http.endpoint = None;
        assert!(http.validate().is_err());
        let mut s = ModelSpec::scripted("m");
        s.endpoint = Some("http://x".into());
        assert!(s.validate().is_err());
        s.endpoint = None;
        s.temperature = -1.0;
        assert!(s.validate().is_err());
    }
}
