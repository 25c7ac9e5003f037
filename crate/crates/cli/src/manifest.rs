//! Run manifests: what was run, with which settings, and what it wrote.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub revision: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Files written, relative to the manifest's directory.
    pub outputs: Vec<String>,
    /// Free-form results (selected epoch, accuracies, counts).
    pub summary: serde_json::Value,
}

impl RunManifest {
    pub fn start(command: &str, seed: u64, config: impl Serialize) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            revision: revision(),
            seed,
            config: serde_json::to_value(config)?,
            started_unix: now(),
            finished_unix: 0,
            outputs: Vec::new(),
            summary: serde_json::Value::Null,
        })
    }

    /// Stamps the finish time and writes `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path) -> Result<()> {
        self.finished_unix = now();
        for f in &self.outputs {
            anyhow::ensure!(dir.join(f).exists(), "manifest lists missing output {f}");
        }
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Source revision from `SITAR_REVISION` or `git rev-parse`, else "unknown".
fn revision() -> String {
    if let Ok(r) = std::env::var("SITAR_REVISION") {
        return r;
    }
    std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}
