//! Run manifests: one `manifest.json` per output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Arguments exactly as parsed; `replay` re-runs from these.
    pub config: serde_json::Value,
    /// Settings derived from the arguments and input files.
    #[serde(default)]
    pub resolved: serde_json::Value,
    pub seed: Option<u64>,
    pub git_describe: String,
    /// Wall-clock seconds per phase. Not part of the reproducible output.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write_to_dir(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::file(&path, e))?;
        Ok(path)
    }
}

/// Named phase timer.
#[derive(Debug)]
pub struct Timings {
    started: Instant,
    phases: BTreeMap<String, f64>,
}

impl Timings {
    pub fn new() -> Self {
        Self { started: Instant::now(), phases: BTreeMap::new() }
    }

    /// Closes the current phase under `name` and starts the next one.
    pub fn lap(&mut self, name: &str) {
        let now = Instant::now();
        self.phases.insert(name.to_string(), (now - self.started).as_secs_f64());
        self.started = now;
    }

    pub fn into_map(self) -> BTreeMap<String, f64> {
        self.phases
    }
}

pub fn git_describe() -> String {
    env!("LATENTPLAN_GIT_DESCRIBE").to_string()
}

/// Directory that holds `path`, `.` for bare file names.
pub fn output_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}
