use std::path::{Path, PathBuf};
use std::sync::Arc;

use hoprag_core::gateway::{BackendKind, Gateway, Script, TemplateSet};
use hoprag_core::orchestrator::{AblationMatrix, PipelineConfig, RunEnv};
use hoprag_core::retrieval::RetrieverKind;

use crate::error::CliError;
use crate::{Backend, Common};

/// Loads the pipeline config named by `--config` (or the defaults) and
/// applies the flag layer on top.
pub fn pipeline_config(common: &Common) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let mut cfg = PipelineConfig::load(path)?;
            anchor_paths(&mut cfg, path);
            cfg
        }
        None => PipelineConfig::default(),
    };
    apply_flags(&mut cfg, common);
    cfg.validate()?;
    Ok(cfg)
}

/// Loads the ablation matrix named by `--config` and applies the flag layer
/// to every configuration in it.
pub fn matrix(common: &Common) -> Result<AblationMatrix, CliError> {
    let path = common
        .config
        .as_deref()
        .ok_or_else(|| CliError::Config("ablate needs --config <matrix.toml>".into()))?;
    let mut matrix = AblationMatrix::load(path)?;
    for cfg in &mut matrix.configs {
        anchor_paths(cfg, path);
        apply_flags(cfg, common);
        cfg.validate()?;
    }
    Ok(matrix)
}

/// Relative paths inside a config file are taken relative to that file.
fn anchor_paths(cfg: &mut PipelineConfig, config_path: &Path) {
    let base = config_path.parent().unwrap_or(Path::new(""));
    if let Some(index) = &cfg.retrieval.index_path {
        if index.is_relative() {
            cfg.retrieval.index_path = Some(base.join(index));
        }
    }
}

fn apply_flags(cfg: &mut PipelineConfig, common: &Common) {
    if let Some(n) = common.max_reflections {
        cfg.max_reflections = n;
    }
    if let Some(backend) = common.backend {
        let kind = match backend {
            Backend::Scripted => BackendKind::Scripted,
            Backend::Http => BackendKind::Http,
        };
        for spec in std::iter::once(&mut cfg.model).chain(cfg.per_module_models.values_mut()) {
            spec.backend = kind;
            if kind == BackendKind::Scripted {
                spec.endpoint = None;
            }
        }
    }
    if cfg.retrieval.kind == RetrieverKind::LocalLexical {
        if let Some(index) = &common.index {
            cfg.retrieval.index_path = Some(index.clone());
        } else if cfg.retrieval.index_path.is_none() {
            cfg.retrieval.index_path = Some(default_index(&common.out_dir));
        }
    }
}

pub fn default_index(out_dir: &Path) -> PathBuf {
    out_dir.join("index.json")
}

pub fn templates(common: &Common) -> Result<TemplateSet, CliError> {
    Ok(match &common.templates {
        Some(dir) => TemplateSet::load_dir(dir)?,
        None => TemplateSet::builtin(),
    })
}

/// Builds the shared gateway, failing before any model call when a scripted
/// model has no script to replay.
pub fn gateway<'a>(
    common: &Common,
    configs: impl IntoIterator<Item = &'a PipelineConfig>,
) -> Result<Gateway, CliError> {
    let needs_script = configs.into_iter().any(|c| {
        c.model.backend == BackendKind::Scripted
            || c.per_module_models
                .values()
                .any(|m| m.backend == BackendKind::Scripted)
    });
    match &common.script {
        Some(path) => Ok(Gateway::with_script(Script::load(path)?)),
        None if needs_script => Err(CliError::Config(
            "the scripted backend needs --script <path> (or pass --backend http)".into(),
        )),
        None => Ok(Gateway::new()),
    }
}

pub fn env(common: &Common, configs: &[&PipelineConfig]) -> Result<(RunEnv, String), CliError> {
    let templates = templates(common)?;
    let digest = templates.digest().to_string();
    let gateway = gateway(common, configs.iter().copied())?;
    Ok((
        RunEnv {
            gateway: Arc::new(gateway),
            templates: Arc::new(templates),
            retriever: None,
        },
        digest,
    ))
}
