//! Deterministic stand-in backend that replays queued responses.

use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{whitespace_tokens, Completion, GatewayError};

/// One queued response and the prompts it may answer.
///
/// All matchers that are set must hold. `module` and `model` compare exactly;
/// `contains` is a substring test on the rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub module: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
    /// Standing rule: never consumed.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub repeat: bool,
}

impl ScriptEntry {
    pub fn new(module: &str, response: impl Into<String>) -> Self {
        ScriptEntry {
            module: Some(module.to_string()),
            model: None,
            contains: None,
            response: response.into(),
            prompt_tokens: None,
            completion_tokens: None,
            repeat: false,
        }
    }

    pub fn containing(mut self, needle: impl Into<String>) -> Self {
        self.contains = Some(needle.into());
        self
    }

    pub fn for_model(mut self, model: impl Into<String>) -> Self {
        self.model = Some(model.into());
        self
    }

    pub fn repeating(mut self) -> Self {
        self.repeat = true;
        self
    }

    pub fn tokens(mut self, prompt: u64, completion: u64) -> Self {
        self.prompt_tokens = Some(prompt);
        self.completion_tokens = Some(completion);
        self
    }

    fn matches(&self, module: &str, model: &str, prompt: &str) -> bool {
        self.module.as_deref().is_none_or(|m| m == module)
            && self.model.as_deref().is_none_or(|m| m == model)
            && self.contains.as_deref().is_none_or(|c| prompt.contains(c))
    }
}

/// An ordered response queue.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Script {
    pub entries: Vec<ScriptEntry>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScriptFile {
    Object(Script),
    List(Vec<ScriptEntry>),
}

impl Script {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        Script { entries }
    }

    pub fn push(&mut self, entry: ScriptEntry) -> &mut Self {
        self.entries.push(entry);
        self
    }

    /// Accepts either `{"entries": [...]}` or a bare JSON array.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        Ok(match serde_json::from_str::<ScriptFile>(text)? {
            ScriptFile::Object(s) => s,
            ScriptFile::List(entries) => Script { entries },
        })
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Script(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| GatewayError::Script(format!("{}: {e}", path.display())))
    }
}

/// Serves each call with the first unconsumed entry that matches it.
#[derive(Debug)]
pub struct ScriptedBackend {
    queue: Mutex<Vec<(ScriptEntry, bool)>>,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        ScriptedBackend {
            queue: Mutex::new(script.entries.into_iter().map(|e| (e, false)).collect()),
        }
    }

    pub fn complete(
        &self,
        module: &str,
        model: &str,
        prompt: &str,
    ) -> Result<Completion, GatewayError> {
        let mut queue = self.queue.lock().expect("script queue poisoned");
        let (entry, consumed) = queue
            .iter_mut()
            .find(|(e, consumed)| !*consumed && e.matches(module, model, prompt))
            .ok_or_else(|| GatewayError::ScriptExhausted {
                module: module.to_string(),
            })?;
        if !entry.repeat {
            *consumed = true;
        }
        let approximate = entry.prompt_tokens.is_none() || entry.completion_tokens.is_none();
        Ok(Completion {
            text: entry.response.clone(),
            prompt_tokens: entry
                .prompt_tokens
                .unwrap_or_else(|| whitespace_tokens(prompt)),
            completion_tokens: entry
                .completion_tokens
                .unwrap_or_else(|| whitespace_tokens(&entry.response)),
            approximate,
        })
    }

    /// Entries not yet consumed (standing rules excluded).
    pub fn remaining(&self) -> usize {
        self.queue
            .lock()
            .expect("script queue poisoned")
            .iter()
            .filter(|(e, consumed)| !e.repeat && !*consumed)
            .count()
    }
}
