//! Append-only run manifests: every command records its config snapshot,
//! seeds, input hashes and produced artifacts, so any artifact can be
//! regenerated from its entry.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("malformed manifest line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn hash_file(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// One appended record per command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: String,
    pub tool_version: String,
    #[serde(default)]
    pub seeds: BTreeMap<String, u64>,
    #[serde(default)]
    pub config: serde_json::Value,
    /// Input path -> content hash.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    /// Artifact path -> content hash.
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
}

impl ManifestEntry {
    pub fn new(command: impl Into<String>) -> Self {
        ManifestEntry {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds: BTreeMap::new(),
            config: serde_json::Value::Null,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn with_seed(mut self, name: &str, seed: u64) -> Self {
        self.seeds.insert(name.to_string(), seed);
        self
    }

    pub fn with_config<T: Serialize>(mut self, config: &T) -> Self {
        self.config = serde_json::to_value(config).unwrap_or(serde_json::Value::Null);
        self
    }

    pub fn record_input(&mut self, path: &Path) -> std::io::Result<()> {
        self.inputs.insert(path.display().to_string(), hash_file(path)?);
        Ok(())
    }

    pub fn record_artifact(&mut self, path: &Path) -> std::io::Result<()> {
        self.artifacts.insert(path.display().to_string(), hash_file(path)?);
        Ok(())
    }
}

/// The manifest file of a run directory.
#[derive(Debug, Clone)]
pub struct RunManifest {
    path: PathBuf,
}

impl RunManifest {
    pub fn in_dir(run_dir: &Path) -> Self {
        RunManifest { path: run_dir.join(MANIFEST_FILE) }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, entry: &ManifestEntry) -> Result<(), ManifestError> {
        if let Some(parent) = self.path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)?;
        let line = serde_json::to_string(entry)
            .map_err(|e| ManifestError::Malformed { line: 0, msg: e.to_string() })?;
        writeln!(file, "{line}")?;
        Ok(())
    }

    pub fn read_all(&self) -> Result<Vec<ManifestEntry>, ManifestError> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let text = std::fs::read_to_string(&self.path)?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line)
                .map_err(|e| ManifestError::Malformed { line: i + 1, msg: e.to_string() })?;
            entries.push(entry);
        }
        Ok(entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = RunManifest::in_dir(dir.path());
        let mut e1 = ManifestEntry::new("synth").with_seed("corpus", 42);
        let input = dir.path().join("input.txt");
        std::fs::write(&input, b"data").unwrap();
        e1.record_input(&input).unwrap();
        manifest.append(&e1).unwrap();
        let e2 = ManifestEntry::new("train").with_seed("stage", 22);
        manifest.append(&e2).unwrap();

        let entries = manifest.read_all().unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0], e1);
        assert_eq!(entries[1], e2);
        assert_eq!(
            entries[0].inputs[&input.display().to_string()],
            sha256_hex(b"data")
        );
    }

    #[test]
    fn sha256_known_value() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn rejects_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = RunManifest::in_dir(dir.path());
        std::fs::write(manifest.path(), "not json\n").unwrap();
        assert!(manifest.read_all().is_err());
    }
}
