//! `manifest.json`: everything needed to rerun a command exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::run::Failure;

pub const FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name.
    pub args: Vec<String>,
    /// Directory relative paths in `args` resolve against.
    pub cwd: PathBuf,
    /// Every training key with its resolved value.
    pub config: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub artifacts: Vec<String>,
    pub version: String,
    pub started_unix_secs: u64,
    /// Filled in when the run finishes.
    pub wall_clock_secs: Option<f64>,
}

impl RunManifest {
    pub fn new(command: &str, args: &[String], config: BTreeMap<String, String>, seeds: Vec<u64>) -> Self {
        RunManifest {
            command: command.to_owned(),
            args: args.to_vec(),
            cwd: std::env::current_dir().unwrap_or_default(),
            config,
            seeds,
            artifacts: Vec::new(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            started_unix_secs: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            wall_clock_secs: None,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), Failure> {
        write_json(&dir.join(FILE), self)
    }

    pub fn read(path: &Path) -> Result<Self, Failure> {
        let raw = std::fs::read(path).map_err(|e| Failure::io(path, e))?;
        serde_json::from_slice(&raw).map_err(|e| Failure::Usage(format!("{}: invalid manifest: {e}", path.display())))
    }

    /// Records the artifacts and elapsed time and rewrites the file.
    pub fn finish(mut self, dir: &Path, artifacts: Vec<String>, started: Instant) -> Result<(), Failure> {
        self.artifacts = artifacts;
        self.wall_clock_secs = Some(started.elapsed().as_secs_f64());
        self.write(dir)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Other(format!("{}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Failure::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Failure::io(path, e))
}
