//! Artifacts are collected in memory and written only once a command has
//! finished, together with a manifest of their sizes and digests.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Serialize)]
struct Entry {
    path: String,
    bytes: usize,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: &'a str,
    seed: Option<u64>,
    files: Vec<Entry>,
}

#[derive(Default)]
pub struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    pub fn add(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.into(), bytes.into()));
    }

    /// Write every artifact under `dir` followed by the manifest.
    pub fn write(self, dir: &Path, command: &str, config_hash: &str, seed: Option<u64>) -> Result<(), CliError> {
        let files = self
            .files
            .iter()
            .map(|(name, bytes)| Entry {
                path: name.clone(),
                bytes: bytes.len(),
                sha256: Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect(),
            })
            .collect();
        let manifest = Manifest {
            command,
            config_hash,
            seed,
            files,
        };
        let manifest = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        let io = |p: &Path, e: std::io::Error| CliError::runtime(format!("{}: {e}", p.display()));
        for (name, bytes) in self.files.iter().map(|(n, b)| (n.as_str(), b.as_slice())).chain([(MANIFEST, manifest.as_bytes())]) {
            let path = dir.join(name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
            }
            std::fs::write(&path, bytes).map_err(|e| io(&path, e))?;
        }
        Ok(())
    }
}
