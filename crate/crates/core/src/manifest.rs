//! Experiment manifests: what went in, what came out, and the hash of
//! every byte of it. Re-running an unchanged manifest must reproduce the
//! same hashes, so nothing time- or host-dependent is recorded.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, ManifestError>;

fn io_err(path: &Path, source: std::io::Error) -> ManifestError {
    ManifestError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub id: String,
    /// Config file the run was driven by; empty for synth runs, which are
    /// fully described by `params`.
    #[serde(default)]
    pub config: String,
    pub seed: u64,
    /// Extra run parameters (synth task, corpus size) as strings, so the
    /// serialized form stays stable.
    #[serde(default)]
    pub params: BTreeMap<String, String>,
    /// Input path -> sha256 of its bytes.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    /// Artifact path (relative to the out-dir) -> sha256 of its bytes.
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
}

impl ExperimentManifest {
    pub fn new(id: impl Into<String>, seed: u64) -> ExperimentManifest {
        ExperimentManifest {
            id: id.into(),
            config: String::new(),
            seed,
            params: BTreeMap::new(),
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn param(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.params.insert(key.into(), value.to_string());
        self
    }

    /// Hashes the file and records it as an input.
    pub fn record_input(&mut self, label: impl Into<String>, path: &Path) -> Result<&mut Self> {
        let hash = sha256_file(path)?;
        self.inputs.insert(label.into(), hash);
        Ok(self)
    }

    /// Hashes the file and records it as a produced artifact.
    pub fn record_artifact(&mut self, label: impl Into<String>, path: &Path) -> Result<&mut Self> {
        let hash = sha256_file(path)?;
        self.artifacts.insert(label.into(), hash);
        Ok(self)
    }

    /// Serialized with sorted maps and fixed field order: identical runs
    /// give identical bytes.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| ManifestError::Parse { path: path.display().to_string(), message: e.to_string() })?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<ExperimentManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| ManifestError::Parse { path: path.display().to_string(), message: e.to_string() })
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf).map_err(|e| io_err(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    Ok(hex)
}
