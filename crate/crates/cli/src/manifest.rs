use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;
use crate::settings::Settings;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self, CliError> {
        let data = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let digest = Sha256::digest(&data);
        let sha256 = digest.iter().map(|b| format!("{b:02x}")).collect();
        Ok(Self { path: path.to_path_buf(), sha256, bytes: data.len() as u64 })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Effective settings after merging flags, config file and defaults.
    pub config: Settings,
    pub seed: u64,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub timings_ms: BTreeMap<String, f64>,
}

/// Collects what a command read, wrote and how long each phase took.
pub struct Recorder {
    started: Instant,
    phase: Instant,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub timings_ms: BTreeMap<String, f64>,
}

impl Recorder {
    pub fn new() -> Self {
        let now = Instant::now();
        Self { started: now, phase: now, inputs: Vec::new(), outputs: Vec::new(), timings_ms: BTreeMap::new() }
    }

    /// Closes the current phase under `name` and starts the next one.
    pub fn lap(&mut self, name: &str) {
        self.timings_ms.insert(name.to_string(), self.phase.elapsed().as_secs_f64() * 1e3);
        self.phase = Instant::now();
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn finish(mut self, command: &str, config: Settings, seed: u64, out_dir: &Path) -> Result<PathBuf, CliError> {
        self.timings_ms.insert("total".into(), self.started.elapsed().as_secs_f64() * 1e3);
        let hash_all = |paths: &[PathBuf]| paths.iter().map(|p| Artifact::of(p)).collect::<Result<Vec<_>, _>>();
        let manifest = Manifest {
            tool: "abpem".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            seed,
            inputs: hash_all(&self.inputs)?,
            outputs: hash_all(&self.outputs)?,
            timings_ms: self.timings_ms,
        };
        let path = out_dir.join(FILE_NAME);
        let text = serde_json::to_string_pretty(&manifest).map_err(abpem::Error::from)?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
