use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Record of one CLI invocation, written to `<out-dir>/runs/<run_id>.json`.
///
/// Only digests of the configurations are stored, never their contents, so
/// nothing read from the environment (API keys included) can leak here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_path: Option<PathBuf>,
    /// Label to SHA-256 of each resolved configuration (after flag overrides).
    pub config_digests: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_path: Option<PathBuf>,
    pub started_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
    pub template_digest: String,
}

impl RunManifest {
    pub fn start(command: &str, template_digest: &str) -> Self {
        RunManifest {
            run_id: String::new(),
            command: command.to_string(),
            config_path: None,
            config_digests: BTreeMap::new(),
            dataset_path: None,
            started_at: Utc::now(),
            finished_at: None,
            template_digest: template_digest.to_string(),
        }
    }

    /// Stamps the finish time, picks a run id not yet used in `out_dir`, and
    /// writes the manifest. Returns the manifest path.
    pub fn finish(&mut self, out_dir: &Path) -> Result<PathBuf, CliError> {
        self.finished_at = Some(Utc::now());
        let dir = out_dir.join("runs");
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let stem = format!(
            "{}-{}",
            self.started_at.format("%Y%m%dT%H%M%S%.3fZ"),
            self.command
        );
        for n in 1.. {
            self.run_id = if n == 1 {
                stem.clone()
            } else {
                format!("{stem}-{n}")
            };
            let path = dir.join(format!("{}.json", self.run_id));
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    let body = serde_json::to_string_pretty(self).expect("manifest serializes");
                    f.write_all(body.as_bytes())
                        .map_err(|e| CliError::io(&path, e))?;
                    return Ok(path);
                }
                Err(e) if e.kind() == ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(CliError::io(&path, e)),
            }
        }
        unreachable!("run id space is unbounded")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_ids_are_unique_per_directory() {
        let dir = tempfile::tempdir().unwrap();
        let first = RunManifest::start("eval", "abc");
        let mut a = first.clone();
        let mut b = first;
        let pa = a.finish(dir.path()).unwrap();
        let pb = b.finish(dir.path()).unwrap();
        assert_ne!(a.run_id, b.run_id);
        assert_ne!(pa, pb);
        let back: RunManifest = serde_json::from_str(&fs::read_to_string(pb).unwrap()).unwrap();
        assert_eq!(back, b);
    }
}
