//! Per-run manifest written next to a command's outputs.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use anyhow::Result;
use serde::Serialize;

use crate::data::write_json;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config_path: Option<PathBuf>,
    /// Effective configuration after flag overrides.
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub git_describe: Option<String>,
    pub wall_time_seconds: f64,
}

pub fn git_describe() -> Option<String> {
    let out = Command::new("git").args(["describe", "--always", "--dirty"]).output().ok()?;
    if !out.status.success() {
        return None;
    }
    let s = String::from_utf8(out.stdout).ok()?.trim().to_string();
    (!s.is_empty()).then_some(s)
}

pub struct ManifestBuilder {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    start: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, config_path: Option<PathBuf>, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config_path,
            seed,
            start: Instant::now(),
        }
    }

    /// Writes `<command>.manifest.json` into `dir`.
    pub fn write(
        &self,
        dir: &Path,
        config: serde_json::Value,
        inputs: Vec<PathBuf>,
        outputs: Vec<PathBuf>,
    ) -> Result<PathBuf> {
        let manifest = RunManifest {
            command: self.command.clone(),
            argv: std::env::args().collect(),
            config_path: self.config_path.clone(),
            config,
            seed: self.seed,
            inputs,
            outputs,
            git_describe: git_describe(),
            wall_time_seconds: self.start.elapsed().as_secs_f64(),
        };
        let path = dir.join(format!("{}.manifest.json", self.command));
        write_json(&path, &manifest)?;
        Ok(path)
    }
}
