//! Run-directory bookkeeping: append-only directories, the manifest, and
//! artifact hashing.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use spt_core::container::sha256_hex;

use crate::config::{config_hash, RunConfig};

#[derive(Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub artifact_hashes: std::collections::BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub duration_seconds: f64,
}

pub struct RunDir {
    pub path: PathBuf,
    command: String,
    seed: u64,
    inputs: Vec<String>,
    outputs: Vec<PathBuf>,
    started: std::time::Instant,
    started_unix: u64,
}

impl RunDir {
    /// Creates (or reuses an empty) run directory. Directories are
    /// append-only: a directory that already holds a manifest is refused.
    pub fn create(path: &Path, command: &str, config: &RunConfig, seed: u64) -> Result<Self> {
        if path.join("manifest.json").exists() {
            bail!(
                "{} already contains a run; reruns go to a fresh directory",
                path.display()
            );
        }
        std::fs::create_dir_all(path)
            .with_context(|| format!("cannot create run directory {}", path.display()))?;
        let run = RunDir {
            path: path.to_path_buf(),
            command: command.to_string(),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: std::time::Instant::now(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let config_path = run.path.join("config.json");
        std::fs::write(&config_path, serde_json::to_string_pretty(config)?)?;
        Ok(run)
    }

    pub fn record_input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    pub fn file(&mut self, name: &str) -> PathBuf {
        let path = self.path.join(name);
        self.outputs.push(path.clone());
        path
    }

    /// Writes a JSON artifact and registers it as an output.
    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let path = self.file(name);
        std::fs::write(&path, serde_json::to_string_pretty(value)?)?;
        Ok(path)
    }

    /// Finalizes the manifest with artifact hashes and timings.
    pub fn finish(mut self, config: &RunConfig) -> Result<()> {
        let mut artifact_hashes = std::collections::BTreeMap::new();
        let config_path = self.path.join("config.json");
        self.outputs.push(config_path);
        for output in &self.outputs {
            if output.exists() {
                let bytes = std::fs::read(output)?;
                let name = output
                    .file_name()
                    .map(|n| n.to_string_lossy().to_string())
                    .unwrap_or_default();
                artifact_hashes.insert(name, sha256_hex(&bytes));
            }
        }
        let manifest = Manifest {
            command: self.command.clone(),
            config_hash: config_hash(config)?,
            seed: self.seed,
            inputs: self.inputs.clone(),
            outputs: self
                .outputs
                .iter()
                .map(|p| p.display().to_string())
                .collect(),
            artifact_hashes,
            started_unix: self.started_unix,
            finished_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            duration_seconds: self.started.elapsed().as_secs_f64(),
        };
        std::fs::write(
            self.path.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }
}
