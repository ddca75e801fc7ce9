//! Run manifests: every command writes a manifest listing its inputs
//! (config hash, seeds, tool version) and every output file with a SHA-256
//! content hash. Reruns with an identical config must reproduce identical
//! content hashes; only the timestamp may differ.

use crate::error::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// SHA-256 of the raw config file bytes.
    pub config_sha256: String,
    /// Unix seconds at manifest creation; excluded from determinism checks.
    pub created_unix: u64,
    /// Named seeds in effect for the run.
    pub seeds: Vec<(String, u64)>,
    pub files: Vec<FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path.display().to_string(), e))?;
    Ok(sha256_hex(&bytes))
}

impl RunManifest {
    pub fn new(command: &str, config_bytes: &[u8], seeds: Vec<(String, u64)>) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: sha256_hex(config_bytes),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            seeds,
            files: Vec::new(),
        }
    }

    /// Hashes `path` and records it under its file name.
    pub fn add_file(&mut self, path: &Path) -> Result<()> {
        let name = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let sha256 = sha256_file(path)?;
        self.files.push(FileEntry { name, sha256 });
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<RunManifest> {
        Ok(serde_json::from_str(text)?)
    }

    /// The determinism contract: same command, config hash, seeds, and
    /// output content hashes, ignoring the timestamp.
    pub fn same_content(&self, other: &RunManifest) -> bool {
        self.command == other.command
            && self.tool_version == other.tool_version
            && self.config_sha256 == other.config_sha256
            && self.seeds == other.seeds
            && self.files.len() == other.files.len()
            && self
                .files
                .iter()
                .zip(&other.files)
                .all(|(a, b)| a.name == b.name && a.sha256 == b.sha256)
    }
}
