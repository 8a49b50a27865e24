//! The run manifest written by every command.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// `ok` or `failed`.
    pub status: String,
    /// SHA-256 of `config.json`.
    pub config_hash: String,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    pub artifacts: Vec<PathBuf>,
    pub tool_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Bookkeeping for one command execution.
///
/// A command calls [`Run::configure`] once its settings are resolved and
/// validated; from then on a manifest is written whatever the outcome.
pub struct Run {
    command: String,
    started_at: String,
    out: Option<PathBuf>,
    config_hash: String,
    seed: u64,
    artifacts: Vec<PathBuf>,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Run {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            started_at: now(),
            out: None,
            config_hash: String::new(),
            seed: 0,
            artifacts: Vec::new(),
        }
    }

    /// Creates `out` and writes the resolved settings to `config.json`.
    /// `config` must be the exact bytes whose hash identifies the run.
    pub fn configure(&mut self, out: &Path, config: &[u8], seed: u64) -> Result<()> {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let path = out.join(CONFIG_FILE);
        std::fs::write(&path, config).with_context(|| format!("writing {}", path.display()))?;
        self.out = Some(out.to_path_buf());
        self.config_hash = sha256_hex(config);
        self.seed = seed;
        self.artifacts.push(path);
        Ok(())
    }

    pub fn artifact(&mut self, path: impl Into<PathBuf>) {
        self.artifacts.push(path.into());
    }

    fn write(&self, status: &str, error: Option<String>) -> Result<Option<PathBuf>> {
        let Some(out) = &self.out else {
            return Ok(None);
        };
        let manifest = RunManifest {
            command: self.command.clone(),
            status: status.into(),
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            started_at: self.started_at.clone(),
            finished_at: now(),
            artifacts: self.artifacts.clone(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            error,
        };
        let path = out.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(Some(path))
    }

    pub fn finish_ok(&self) -> Result<Option<PathBuf>> {
        self.write("ok", None)
    }

    pub fn finish_failed(&self, err: &anyhow::Error) -> Result<Option<PathBuf>> {
        self.write("failed", Some(format!("{err:#}")))
    }
}
