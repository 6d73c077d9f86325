//! Per-stage run manifests under `manifests/<stage>.json`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, Resolved, RunConfig};
use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory when inside it.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub seconds: f64,
    pub threads: usize,
    pub notes: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok((hex(&Sha256::digest(&bytes)), bytes.len() as u64))
}

/// Writes `bytes`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Collects what one stage read and wrote while it runs.
pub struct StageRecorder<'a> {
    cfg: &'a Resolved,
    stage: &'static str,
    start: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    notes: Vec<String>,
}

impl<'a> StageRecorder<'a> {
    pub fn new(cfg: &'a Resolved, stage: &'static str) -> Self {
        Self {
            cfg,
            stage,
            start: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) {
        let p = path.into();
        if !self.inputs.contains(&p) {
            self.inputs.push(p);
        }
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        let p = path.into();
        if !self.outputs.contains(&p) {
            self.outputs.push(p);
        }
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    pub fn path(&self) -> PathBuf {
        self.cfg.out().join("manifests").join(format!("{}.json", self.stage))
    }

    fn artifact(&self, p: &Path) -> Result<Artifact> {
        let (sha256, bytes) = sha256_file(p)?;
        Ok(Artifact {
            path: self.cfg.display_path(p),
            sha256,
            bytes,
        })
    }

    pub fn finish(self) -> Result<RunManifest> {
        let path = self.path();
        let m = RunManifest {
            stage: self.stage.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: self.cfg.config_hash.clone(),
            config: self.cfg.run.clone(),
            inputs: self.inputs.iter().map(|p| self.artifact(p)).collect::<Result<_>>()?,
            outputs: self.outputs.iter().map(|p| self.artifact(p)).collect::<Result<_>>()?,
            seconds: self.start.elapsed().as_secs_f64(),
            threads: sepsis_rl::par::threads(),
            notes: self.notes.clone(),
        };
        let json = serde_json::to_string_pretty(&m).expect("manifest serialises");
        write_file(&path, json.as_bytes())?;
        Ok(m)
    }
}

pub fn load_manifest(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
