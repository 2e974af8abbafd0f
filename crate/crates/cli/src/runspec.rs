//! Run configuration merging and the run manifest.
//!
//! Precedence: built-in defaults < config file < command-line flags. The
//! merged snapshot is frozen into the manifest, which is written before any
//! computation starts and finalized with the wall-clock time at the end.

use std::fs;
use std::path::Path;
use std::time::Instant;

use ecgtext_core::model::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Model + training configuration as stored in config files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn defaults(vocab_size: usize) -> Self {
        RunConfig { model: ModelConfig::desk(vocab_size), train: TrainConfig::default() }
    }
}

/// Overlay `patch` onto `base` recursively (objects merge, anything else
/// replaces).
fn merge_json(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge_json(b.entry(k.clone()).or_insert(serde_json::Value::Null), v);
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Load defaults, overlay an optional config file, and hand the result to
/// the caller for flag-level overrides.
pub fn load_config(vocab_size: usize, config_path: Option<&Path>) -> CliResult<RunConfig> {
    let mut base = serde_json::to_value(RunConfig::defaults(vocab_size))?;
    if let Some(path) = config_path {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let patch: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        merge_json(&mut base, &patch);
    }
    let cfg: RunConfig =
        serde_json::from_value(base).map_err(|e| CliError::usage(format!("bad config: {e}")))?;
    Ok(cfg)
}

/// Everything needed to reproduce a run, written to `manifest.json` in the
/// output directory before computation begins.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub code_version: String,
    pub outputs: Vec<String>,
    /// Seconds; null until the run finishes.
    pub wall_clock_s: Option<f64>,
}

pub struct ManifestWriter {
    manifest: RunManifest,
    path: std::path::PathBuf,
    started: Instant,
}

impl ManifestWriter {
    /// Write the initial manifest (wall clock pending) and return the handle.
    pub fn start(
        out_dir: &Path,
        command: &str,
        args: Vec<String>,
        seed: u64,
        config: serde_json::Value,
        config_hash: String,
        outputs: Vec<String>,
    ) -> CliResult<Self> {
        fs::create_dir_all(out_dir)?;
        let manifest = RunManifest {
            command: command.to_string(),
            args,
            seed,
            config,
            config_hash,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            outputs,
            wall_clock_s: None,
        };
        let path = out_dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(ManifestWriter { manifest, path, started: Instant::now() })
    }

    /// Rewrite with the elapsed wall clock.
    pub fn finish(mut self) -> CliResult<()> {
        self.manifest.wall_clock_s = Some(self.started.elapsed().as_secs_f64());
        fs::write(&self.path, serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_overrides_defaults_only_where_given() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"train": {"batch_size": 8}, "model": {"dim": 32}}"#).unwrap();
        let cfg = load_config(70, Some(&path)).unwrap();
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.model.dim, 32);
        // untouched fields keep published defaults
        assert_eq!(cfg.train.lr, 2e-4);
        assert_eq!(cfg.model.tau1, 0.25);
    }

    #[test]
    fn bad_config_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, "{ not json").unwrap();
        let err = load_config(70, Some(&path)).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
