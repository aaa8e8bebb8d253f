use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub status: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: Option<RunConfig>,
    /// Flags that are not config keys (paths, memory mode, ...).
    pub args: Vec<(String, String)>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_secs: f64,
    #[serde(skip)]
    dir: PathBuf,
}

impl RunManifest {
    pub fn new(command: &str, dir: &Path) -> Self {
        Self {
            command: command.to_string(),
            status: "running".into(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: 0,
            config: None,
            args: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_clock_secs: 0.0,
            dir: dir.to_path_buf(),
        }
    }

    pub fn arg(&mut self, key: &str, value: impl ToString) {
        self.args.push((key.to_string(), value.to_string()));
    }

    pub fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    pub fn output(&mut self, p: &Path) {
        self.outputs.push(p.to_path_buf());
    }

    pub fn finish(&mut self, cfg: &RunConfig, secs: f64, err: Option<&anyhow::Error>) {
        self.seed = cfg.seed;
        self.config = Some(cfg.clone());
        self.wall_clock_secs = secs;
        self.status = match err {
            None => "ok".into(),
            Some(e) => format!("failed: {e:#}"),
        };
        if err.is_some() {
            // partial outputs are not trustworthy
            for p in &self.outputs {
                if p.is_file() {
                    let _ = fs::remove_file(p);
                }
            }
            self.outputs.clear();
        }
    }

    pub fn write(&self) -> Result<()> {
        let path = self.dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self)?;
        fs::write(&path, json).with_context(|| format!("writing {}", path.display()))
    }
}
