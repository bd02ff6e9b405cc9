//! Every run writes a `manifest.txt` next to its artifacts: the resolved
//! configuration, the seed, and a SHA-256 per artifact, one sorted
//! `key = value` line each. Repeating a command must reproduce the manifest
//! byte for byte, so nothing time- or path-of-the-day-dependent goes in.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use scbd::util::fsio;

use crate::CliError;

pub struct Manifest {
    entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        let mut entries = BTreeMap::new();
        entries.insert("command".to_string(), command.to_string());
        Manifest { entries }
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Hashes `dir/name` into an `artifact.<name>` entry.
    pub fn artifact(&mut self, dir: &Path, name: &str) -> Result<(), CliError> {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| {
            CliError::Runtime(format!("cannot hash artifact {}: {e}", path.display()))
        })?;
        self.set(&format!("artifact.{name}"), sha256_hex(&bytes));
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let mut text = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(text, "{k} = {v}");
        }
        let path = dir.join("manifest.txt");
        fsio::atomic_write(&path, text.as_bytes())
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let mut out = String::with_capacity(64);
    for byte in hasher.finalize() {
        let _ = write!(out, "{byte:02x}");
    }
    out
}
