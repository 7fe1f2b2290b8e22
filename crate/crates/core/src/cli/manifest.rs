use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pipeline::ModelConfig;

/// Record of one command run, written next to its artifacts.
///
/// Timestamps come from `SOURCE_DATE_EPOCH` (0 when unset) so that
/// repeated runs produce identical bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub artifact_version: String,
    pub seed: u64,
    pub started: u64,
    pub finished: u64,
    pub outputs: Vec<PathBuf>,
    pub config: ModelConfig,
}

impl RunManifest {
    pub fn new(command: &str, config: &ModelConfig) -> Self {
        let t = source_date_epoch();
        Self {
            command: command.to_string(),
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            started: t,
            finished: t,
            outputs: Vec::new(),
            config: config.clone(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "artifact_version = {}", self.artifact_version);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "started = {}", self.started);
        let _ = writeln!(s, "finished = {}", self.finished);
        for p in &self.outputs {
            let _ = writeln!(s, "output = {}", p.display());
        }
        s.push_str("[config]\n");
        s.push_str(&self.config.to_text());
        s
    }

    pub fn write(&mut self, path: &Path) -> Result<()> {
        self.finished = source_date_epoch();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn source_date_epoch() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.trim().parse().ok()).unwrap_or(0)
}
