//! Prompt templates and the labeled-field output grammar.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("no binding for input field '{0}'")]
    MissingBinding(String),
    #[error("output field '{0}' is missing")]
    MissingField(String),
    #[error("output field '{0}' appears more than once")]
    DuplicateField(String),
    #[error("template '{name}' is malformed: {reason}")]
    Malformed { name: String, reason: String },
    #[error("unknown template '{0}'")]
    Unknown(String),
    #[error("cannot read template {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub system_text: String,
    pub input_fields: Vec<String>,
    pub output_fields: Vec<String>,
}

const INPUT_HEADER: &str = "Input fields are:";
const OUTPUT_HEADER: &str = "Output fields are:";

impl PromptTemplate {
    pub fn new(
        name: impl Into<String>,
        system_text: impl Into<String>,
        input_fields: Vec<String>,
        output_fields: Vec<String>,
    ) -> Result<Self, TemplateError> {
        let t = PromptTemplate {
            name: name.into(),
            system_text: system_text.into(),
            input_fields,
            output_fields,
        };
        t.validate()?;
        Ok(t)
    }

    /// Builds a template from prompt text that ends with the
    /// `Input fields are:` / `Output fields are:` listing. The whole text is
    /// kept as the system text; the labels come from the listing.
    pub fn from_prompt_text(name: &str, text: &str) -> Result<Self, TemplateError> {
        let malformed = |reason: &str| TemplateError::Malformed {
            name: name.to_string(),
            reason: reason.to_string(),
        };
        let input_at = text
            .rfind(INPUT_HEADER)
            .ok_or_else(|| malformed("no input field listing"))?;
        let output_at = text
            .rfind(OUTPUT_HEADER)
            .ok_or_else(|| malformed("no output field listing"))?;
        if output_at < input_at {
            return Err(malformed("output listing precedes input listing"));
        }
        let labels = |section: &str| -> Vec<String> {
            section
                .lines()
                .filter_map(|l| {
                    l.split_once(": {")
                        .map(|(label, _)| label.trim().to_string())
                })
                .filter(|l| !l.is_empty())
                .collect()
        };
        let inputs = labels(&text[input_at + INPUT_HEADER.len()..output_at]);
        let outputs = labels(&text[output_at + OUTPUT_HEADER.len()..]);
        PromptTemplate::new(name, text.trim_end(), inputs, outputs)
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        let malformed = |reason: String| TemplateError::Malformed {
            name: self.name.clone(),
            reason,
        };
        if self.output_fields.is_empty() {
            return Err(malformed("no output fields".into()));
        }
        for label in self.input_fields.iter().chain(&self.output_fields) {
            if label.contains('\n') || label.trim().is_empty() {
                return Err(malformed(format!("bad label {label:?}")));
            }
        }
        // labels are unique per side; inputs and outputs may share a label
        let mut seen = HashSet::new();
        for side in [&self.input_fields, &self.output_fields] {
            seen.clear();
            for label in side {
                if !seen.insert(label) {
                    return Err(malformed(format!("duplicate label {label:?}")));
                }
            }
        }
        Ok(())
    }

    /// System text followed by one `Label: value` entry per input field, in
    /// template order.
    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<String, TemplateError> {
        let mut out = self.system_text.clone();
        for (i, label) in self.input_fields.iter().enumerate() {
            let value = bindings
                .get(label)
                .ok_or_else(|| TemplateError::MissingBinding(label.clone()))?;
            out.push_str(if i == 0 { "\n\n" } else { "\n" });
            out.push_str(label);
            out.push_str(": ");
            out.push_str(value);
        }
        Ok(out)
    }

    /// Convenience wrapper over [`render`](Self::render) for `(label, value)` pairs.
    pub fn render_pairs(&self, pairs: &[(&str, &str)]) -> Result<String, TemplateError> {
        let bindings = pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        self.render(&bindings)
    }
}

/// Splits model output into labeled fields.
///
/// A field starts at a line beginning with `Label:` (leading whitespace
/// allowed) and runs until the next expected label or the end of the text.
/// Labels may come in any order but at most once. When exactly one label is
/// missing and it is the last expected one, unlabeled text fills it: text
/// before the first label if any, otherwise the final blank-line-separated
/// paragraph of the last field.
pub fn parse_fields(
    text: &str,
    expected: &[String],
) -> Result<BTreeMap<String, String>, TemplateError> {
    assert!(
        !expected.is_empty(),
        "parse_fields needs at least one label"
    );
    // longest label first so "Output" never shadows "Output Format"
    let mut by_length: Vec<&String> = expected.iter().collect();
    by_length.sort_by_key(|l| std::cmp::Reverse(l.len()));

    let mut found: Vec<(String, String)> = Vec::new();
    let mut leading = String::new();
    for line in text.lines() {
        let stripped = line.trim_start();
        let hit = by_length.iter().find(|label| {
            stripped
                .strip_prefix(label.as_str())
                .is_some_and(|rest| rest.starts_with(':'))
        });
        match hit {
            Some(label) => {
                if found.iter().any(|(l, _)| l == *label) {
                    return Err(TemplateError::DuplicateField(label.to_string()));
                }
                let rest = &stripped[label.len() + 1..];
                found.push((label.to_string(), rest.to_string()));
            }
            None => {
                let buf = match found.last_mut() {
                    Some((_, value)) => value,
                    None => &mut leading,
                };
                buf.push('\n');
                buf.push_str(line);
            }
        }
    }

    let mut fields: BTreeMap<String, String> = found
        .into_iter()
        .map(|(l, v)| (l, v.trim().to_string()))
        .collect();
    let missing: Vec<&String> = expected
        .iter()
        .filter(|l| !fields.contains_key(*l))
        .collect();
    match missing.as_slice() {
        [] => Ok(fields),
        [only] if *only == expected.last().unwrap() => {
            let leading = leading.trim();
            if !leading.is_empty() {
                fields.insert(only.to_string(), leading.to_string());
                return Ok(fields);
            }
            // take the trailing paragraph of whichever field ends the text
            let last_label = last_label_in(text, expected, &fields);
            if let Some(label) = last_label {
                let value = fields.get(&label).cloned().unwrap_or_default();
                if let Some((head, tail)) = split_last_paragraph(&value) {
                    fields.insert(label, head);
                    fields.insert(only.to_string(), tail);
                    return Ok(fields);
                }
            }
            Err(TemplateError::MissingField(only.to_string()))
        }
        [first, ..] => Err(TemplateError::MissingField(first.to_string())),
    }
}

fn last_label_in(
    text: &str,
    expected: &[String],
    fields: &BTreeMap<String, String>,
) -> Option<String> {
    let mut last = None;
    for line in text.lines() {
        let stripped = line.trim_start();
        for label in expected {
            if fields.contains_key(label)
                && stripped
                    .strip_prefix(label.as_str())
                    .is_some_and(|r| r.starts_with(':'))
            {
                last = Some(label.clone());
            }
        }
    }
    last
}

fn split_last_paragraph(value: &str) -> Option<(String, String)> {
    let normalized = value.replace("\r\n", "\n");
    let idx = normalized.rfind("\n\n")?;
    let head = normalized[..idx].trim().to_string();
    let tail = normalized[idx..].trim().to_string();
    (!head.is_empty() && !tail.is_empty()).then_some((head, tail))
}

/// Names of the built-in templates, in the order they appear in the prompt set.
pub const TEMPLATE_NAMES: [&str; 12] = [
    "decompose",
    "construct",
    "decide",
    "rewrite",
    "rerank",
    "answer",
    "verify",
    "finalize",
    "improve_analysis",
    "improve_decomposition",
    "final_verify",
    "evaluate",
];

const DECOMPOSE_EXAMPLES: &str = "decompose_examples";

fn builtin_text(name: &str) -> Option<&'static str> {
    Some(match name {
        "decompose" => include_str!("../../templates/decompose.txt"),
        "decompose_examples" => include_str!("../../templates/decompose_examples.txt"),
        "construct" => include_str!("../../templates/construct.txt"),
        "decide" => include_str!("../../templates/decide.txt"),
        "rewrite" => include_str!("../../templates/rewrite.txt"),
        "rerank" => include_str!("../../templates/rerank.txt"),
        "answer" => include_str!("../../templates/answer.txt"),
        "verify" => include_str!("../../templates/verify.txt"),
        "finalize" => include_str!("../../templates/finalize.txt"),
        "improve_analysis" => include_str!("../../templates/improve_analysis.txt"),
        "improve_decomposition" => include_str!("../../templates/improve_decomposition.txt"),
        "final_verify" => include_str!("../../templates/final_verify.txt"),
        "evaluate" => include_str!("../../templates/evaluate.txt"),
        _ => return None,
    })
}

/// The full prompt set used by the reasoning modules.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<String, PromptTemplate>,
    digest: String,
}

impl TemplateSet {
    /// Templates compiled into the crate.
    pub fn builtin() -> Self {
        Self::from_source(|name| Ok(builtin_text(name).map(str::to_string)))
            .expect("built-in templates are well formed")
    }

    /// Loads `<name>.txt` files from `dir`, falling back to the built-in text
    /// for any file that is absent.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        Self::from_source(|name| {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                std::fs::read_to_string(&path)
                    .map(Some)
                    .map_err(|e| TemplateError::Io {
                        path: path.display().to_string(),
                        reason: e.to_string(),
                    })
            } else {
                Ok(builtin_text(name).map(str::to_string))
            }
        })
    }

    fn from_source(
        mut read: impl FnMut(&str) -> Result<Option<String>, TemplateError>,
    ) -> Result<Self, TemplateError> {
        let mut hasher = Sha256::new();
        let mut templates = BTreeMap::new();
        let examples = read(DECOMPOSE_EXAMPLES)?.unwrap_or_default();
        for name in TEMPLATE_NAMES {
            let text = read(name)?.ok_or_else(|| TemplateError::Unknown(name.to_string()))?;
            hasher.update(name.as_bytes());
            hasher.update([0]);
            hasher.update(text.as_bytes());
            hasher.update([0]);
            let mut template = PromptTemplate::from_prompt_text(name, &text)?;
            if name == "decompose" && !examples.trim().is_empty() {
                template.system_text =
                    format!("{}\n\n{}", template.system_text, examples.trim_end());
            }
            templates.insert(name.to_string(), template);
        }
        hasher.update(DECOMPOSE_EXAMPLES.as_bytes());
        hasher.update(examples.as_bytes());
        Ok(TemplateSet {
            templates,
            digest: hex::encode(hasher.finalize()),
        })
    }

    pub fn get(&self, name: &str) -> Result<&PromptTemplate, TemplateError> {
        self.templates
            .get(name)
            .ok_or_else(|| TemplateError::Unknown(name.to_string()))
    }

    /// SHA-256 over every template file, for run manifests.
    pub fn digest(&self) -> &str {
        &self.digest
    }
}
