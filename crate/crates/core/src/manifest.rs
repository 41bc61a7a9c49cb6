//! Run manifest: config hash, input and output digests, row counts.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Each command writes its own manifest, so staged runs sharing an output
/// directory keep one per stage.
pub fn file_name(command: &str) -> String {
    format!("manifest_{command}.json")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct FileEntry {
    pub sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rows: Option<u64>,
}

/// Deterministic by construction: keys are sorted and nothing depends on
/// wall-clock time, paths outside the run, or the worker count.
#[derive(Debug, Clone, Serialize, PartialEq, Eq, Default)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, FileEntry>,
    pub outputs: BTreeMap<String, FileEntry>,
    pub counts: BTreeMap<String, u64>,
    pub warnings: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config_sha256: &str) -> Self {
        Manifest { command: command.to_string(), config_sha256: config_sha256.to_string(), ..Default::default() }
    }

    /// Records an input file under its file name.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        self.inputs.insert(name, FileEntry { sha256: file_sha256(path)?, rows: None });
        Ok(())
    }

    pub fn output(&mut self, name: &str, bytes: &[u8], rows: Option<u64>) {
        self.outputs.insert(name.to_string(), FileEntry { sha256: sha256_hex(bytes), rows });
    }

    pub fn count(&mut self, key: &str, n: u64) {
        self.counts.insert(key.to_string(), n);
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        let message = message.into();
        log::warn!("{message}");
        self.warnings.push(message);
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        let path = dir.join(file_name(&self.command));
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn serialization_is_sorted() {
        let mut m = Manifest::new("all", "00");
        m.count("z", 1);
        m.count("a", 2);
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.find("\"a\"").unwrap() < text.find("\"z\"").unwrap());
    }
}
