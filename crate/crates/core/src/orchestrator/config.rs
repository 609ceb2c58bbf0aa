use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{BackendKind, ModelSpec};
use crate::modules::{ModelAssignment, ModuleKind};
use crate::retrieval::RetrieverConfig;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("coupling rule violated in '{label}': {rule}")]
    Coupling { label: String, rule: String },
    #[error("invalid config '{label}': {reason}")]
    Invalid { label: String, reason: String },
}

fn yes() -> bool {
    true
}

/// Which modules run. Field names follow the usual abbreviations:
/// decomposition, construction, rewriting, reranking, verification,
/// retrieval decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleFlags {
    #[serde(default = "yes")]
    pub qd: bool,
    #[serde(default = "yes")]
    pub qc: bool,
    #[serde(default = "yes")]
    pub qr: bool,
    #[serde(default = "yes")]
    pub pr: bool,
    #[serde(default = "yes")]
    pub av: bool,
    #[serde(default = "yes")]
    pub rd: bool,
    #[serde(default = "yes")]
    pub simple_qa: bool,
}

impl Default for ModuleFlags {
    fn default() -> Self {
        ModuleFlags {
            qd: true,
            qc: true,
            qr: true,
            pr: true,
            av: true,
            rd: true,
            simple_qa: true,
        }
    }
}

impl ModuleFlags {
    /// Modules whose model calls may appear in a trace under these flags.
    pub fn allows(&self, kind: ModuleKind) -> bool {
        match kind {
            ModuleKind::Decompose => self.qd,
            ModuleKind::Construct => self.qc,
            ModuleKind::Decide => self.rd,
            ModuleKind::Rewrite => self.qr,
            ModuleKind::Rerank => self.pr,
            ModuleKind::Verify | ModuleKind::FinalVerify => self.av,
            ModuleKind::ImproveAnalysis | ModuleKind::ImproveDecomposition => self.qd && self.av,
            ModuleKind::Answer | ModuleKind::Finalize | ModuleKind::Evaluate => true,
        }
    }
}

fn default_label() -> String {
    "default".into()
}

fn default_model() -> ModelSpec {
    ModelSpec::scripted("scripted")
}

fn default_reflections() -> u32 {
    3
}

fn default_retries() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_label")]
    pub label: String,
    #[serde(default)]
    pub enable: ModuleFlags,
    /// Model used by every module without an override.
    #[serde(default = "default_model")]
    pub model: ModelSpec,
    #[serde(default)]
    pub per_module_models: BTreeMap<ModuleKind, ModelSpec>,
    #[serde(default = "default_reflections")]
    pub max_reflections: u32,
    #[serde(default = "default_retries")]
    pub per_step_retries: u32,
    #[serde(default)]
    pub retrieval: RetrieverConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            label: default_label(),
            enable: ModuleFlags::default(),
            model: default_model(),
            per_module_models: BTreeMap::new(),
            max_reflections: default_reflections(),
            per_step_retries: default_retries(),
            retrieval: RetrieverConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&read(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let coupling = |rule: &str| ConfigError::Coupling {
            label: self.label.clone(),
            rule: rule.to_string(),
        };
        let invalid = |reason: String| ConfigError::Invalid {
            label: self.label.clone(),
            reason,
        };
        let f = &self.enable;
        if f.qd != f.qc {
            return Err(coupling("QD and QC must be enabled or disabled together"));
        }
        if f.qr && !f.av {
            return Err(coupling(
                "QR requires AV (query rewriting is driven by answer verification)",
            ));
        }
        if f.simple_qa && !f.av {
            return Err(coupling(
                "simple_qa requires AV (escalation is decided by verification)",
            ));
        }
        if self.label.trim().is_empty() {
            return Err(invalid("label must not be empty".into()));
        }
        self.models()
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        self.retrieval
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        Ok(())
    }

    pub fn models(&self) -> ModelAssignment {
        ModelAssignment {
            default: self.model.clone(),
            overrides: self.per_module_models.clone(),
        }
    }

    /// True when every module, including the judge, uses the scripted backend.
    pub fn all_scripted(&self) -> bool {
        self.model.backend == BackendKind::Scripted
            && self
                .per_module_models
                .values()
                .all(|m| m.backend == BackendKind::Scripted)
    }

    /// SHA-256 of the canonical JSON form; stable across key order in the source file.
    pub fn digest(&self) -> String {
        let canonical =
            serde_json::to_string(&serde_json::to_value(self).expect("config serializes"))
                .expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// A list of configurations compared against one baseline.
///
/// File layout: an optional `baseline` label, a `[base]` table holding any
/// `PipelineConfig` keys, and `[[configs]]` entries that are deep-merged
/// over the base. A file without `[[configs]]` yields the base alone.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationMatrix {
    pub baseline: String,
    pub configs: Vec<PipelineConfig>,
}

impl AblationMatrix {
    pub fn new(
        configs: Vec<PipelineConfig>,
        baseline: Option<String>,
    ) -> Result<Self, ConfigError> {
        let first = configs.first().ok_or_else(|| ConfigError::Invalid {
            label: "matrix".into(),
            reason: "no configurations".into(),
        })?;
        let baseline = baseline.unwrap_or_else(|| first.label.clone());
        let mut seen = BTreeSet::new();
        for c in &configs {
            c.validate()?;
            if !seen.insert(c.label.as_str()) {
                return Err(ConfigError::Invalid {
                    label: c.label.clone(),
                    reason: "duplicate label in matrix".into(),
                });
            }
        }
        if !seen.contains(baseline.as_str()) {
            return Err(ConfigError::Invalid {
                label: baseline,
                reason: "baseline label names no configuration".into(),
            });
        }
        Ok(AblationMatrix { baseline, configs })
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let parse = |e: toml::de::Error| ConfigError::Parse(e.to_string());
        let mut doc: toml::Table = toml::from_str(text).map_err(parse)?;
        let baseline = match doc.remove("baseline") {
            None => None,
            Some(toml::Value::String(s)) => Some(s),
            Some(_) => return Err(ConfigError::Parse("baseline must be a string".into())),
        };
        let base = match doc.remove("base") {
            None => toml::Table::new(),
            Some(toml::Value::Table(t)) => t,
            Some(_) => return Err(ConfigError::Parse("base must be a table".into())),
        };
        let overrides = match doc.remove("configs") {
            None => Vec::new(),
            Some(toml::Value::Array(items)) => items,
            Some(_) => {
                return Err(ConfigError::Parse(
                    "configs must be an array of tables".into(),
                ))
            }
        };
        if let Some(key) = doc.keys().next() {
            return Err(ConfigError::Parse(format!("unknown top-level key '{key}'")));
        }
        let tables: Vec<toml::Table> = if overrides.is_empty() {
            vec![base]
        } else {
            overrides
                .into_iter()
                .map(|item| match item {
                    toml::Value::Table(t) => {
                        let mut merged = base.clone();
                        deep_merge(&mut merged, t);
                        Ok(merged)
                    }
                    _ => Err(ConfigError::Parse("configs entries must be tables".into())),
                })
                .collect::<Result<_, _>>()?
        };
        let configs = tables
            .into_iter()
            .map(|t| PipelineConfig::deserialize(toml::Value::Table(t)).map_err(parse))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(configs, baseline)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&read(path)?)
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

fn deep_merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => deep_merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
