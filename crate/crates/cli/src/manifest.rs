use std::path::{Path, PathBuf};
use std::time::Instant;

use duq_core::{DuqError, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Record of one command: enough to rerun it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub artifacts: Vec<PathBuf>,
    pub tool_version: String,
    pub wall_time_s: f64,
}

pub struct ManifestBuilder {
    subcommand: String,
    start: Instant,
    config: serde_json::Value,
    seed: Option<u64>,
    artifacts: Vec<PathBuf>,
}

impl ManifestBuilder {
    pub fn new(subcommand: &str) -> Self {
        ManifestBuilder {
            subcommand: subcommand.into(),
            start: Instant::now(),
            config: serde_json::Value::Null,
            seed: None,
            artifacts: Vec::new(),
        }
    }

    pub fn config<T: Serialize>(&mut self, cfg: &T) -> Result<()> {
        self.config = serde_json::to_value(cfg)?;
        Ok(())
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn artifact(&mut self, path: impl Into<PathBuf>) {
        self.artifacts.push(path.into());
    }

    pub fn write(self, path: &Path) -> Result<RunManifest> {
        let m = RunManifest {
            command: std::env::args().collect(),
            subcommand: self.subcommand,
            config: self.config,
            seed: self.seed,
            artifacts: self.artifacts,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            wall_time_s: self.start.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&m)?;
        std::fs::write(path, text).map_err(|e| DuqError::io(path, e))?;
        Ok(m)
    }
}

/// Manifest path for a command whose output is a single file.
pub fn beside(file: &Path) -> PathBuf {
    let stem = file
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    file.with_file_name(format!("{stem}.manifest.json"))
}
