//! `manifest.json`: what a run directory contains and how it was produced.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved config, overrides applied.
    pub config: serde_json::Value,
    pub seed: u64,
    /// Content hash of the canonical config JSON.
    pub config_hash: String,
    /// Named input paths with their content hashes.
    pub inputs: BTreeMap<String, InputRecord>,
    /// Output paths relative to the run directory, with content hashes.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: String,
    pub hash: String,
}

/// Git-style content hash: SHA-256 over `blob <len>\0<bytes>`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> std::io::Result<String> {
    Ok(content_hash(&fs::read(path)?))
}

/// Hashes of every file under `dir` except the manifest itself, keyed by
/// `/`-separated relative path.
pub fn hash_tree(dir: &Path) -> std::io::Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> std::io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
                continue;
            }
            let rel = path.strip_prefix(root).expect("walk stays under root");
            let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            if key != MANIFEST_FILE {
                out.insert(key, file_hash(&path)?);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seed: u64) -> serde_json::Result<Self> {
        let config = serde_json::to_value(config)?;
        // serde_json maps are key-sorted, so this is canonical
        let config_hash = content_hash(serde_json::to_string(&config)?.as_bytes());
        Ok(Self { command: command.into(), config, seed, config_hash, inputs: BTreeMap::new(), outputs: BTreeMap::new() })
    }

    pub fn input(mut self, name: &str, path: &Path, hash: String) -> Self {
        self.inputs.insert(name.into(), InputRecord { path: path.display().to_string(), hash });
        self
    }

    /// Records the run directory's contents and writes the manifest into it.
    pub fn write(mut self, run_dir: &Path) -> std::io::Result<Self> {
        self.outputs = hash_tree(run_dir)?;
        let text = serde_json::to_string_pretty(&self).map_err(std::io::Error::other)?;
        fs::write(run_dir.join(MANIFEST_FILE), text)?;
        Ok(self)
    }

    pub fn read(run_dir: &Path) -> std::io::Result<Self> {
        let text = fs::read_to_string(run_dir.join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }
}
