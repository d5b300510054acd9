use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

/// Provenance record written next to every command's outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name; `rerun` replays these.
    pub argv: Vec<String>,
    pub tool_version: String,
    pub seed: u64,
    pub threads: Option<usize>,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

impl RunManifest {
    pub fn new(command: &str, argv: Vec<String>, seed: u64, threads: Option<usize>) -> Self {
        RunManifest {
            command: command.to_string(),
            argv,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            threads,
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
        }
    }

    pub fn input(&mut self, p: &Path) {
        self.inputs.push(p.display().to_string());
    }

    pub fn output(&mut self, p: &Path) {
        self.outputs.push(p.display().to_string());
    }

    pub fn config<T: Serialize>(&mut self, c: &T) {
        self.config = serde_json::to_value(c).expect("serialisable config");
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&mut self, path: &Path) -> Result<()> {
        self.finished_unix_ms = now_ms();
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing manifest {}", path.display()))
    }
}

/// `<file>.manifest.json` for a file artifact, `<dir>/manifest.json` for a directory.
pub fn manifest_path(artifact: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        artifact.join("manifest.json")
    } else {
        let mut s = artifact.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}
