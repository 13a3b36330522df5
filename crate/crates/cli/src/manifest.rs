//! Run manifests: what a command read, wrote and was configured with.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(FileDigest {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub started_unix_s: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument vector; rerunning it reproduces the outputs.
    pub args: Vec<String>,
    pub tool_version: String,
    pub config: serde_json::Value,
    /// SHA-256 of the canonical JSON config.
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub timings: Timings,
}

/// Collects inputs and outputs while a command runs.
pub struct ManifestBuilder {
    command: String,
    started: Instant,
    started_unix: f64,
    inputs: Vec<FileDigest>,
    outputs: Vec<PathBuf>,
}

impl ManifestBuilder {
    pub fn start(command: &str) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            started: Instant::now(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0.0, |d| d.as_secs_f64()),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    /// Digests every output and writes `manifest.json` into `dir`.
    pub fn finish<C: Serialize>(self, dir: &Path, config: &C, seed: u64) -> Result<PathBuf> {
        let config = serde_json::to_value(config)?;
        let canonical = serde_json::to_string(&config)?;
        let outputs = self
            .outputs
            .iter()
            .map(|p| FileDigest::of(p))
            .collect::<Result<Vec<_>>>()?;
        let manifest = RunManifest {
            command: self.command,
            args: std::env::args().collect(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: hex::encode(Sha256::digest(canonical.as_bytes())),
            config,
            seed,
            inputs: self.inputs,
            outputs,
            timings: Timings {
                started_unix_s: self.started_unix,
                wall_time_s: self.started.elapsed().as_secs_f64(),
            },
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
