//! `MANIFEST.json`: what a command ran with and what it wrote.
//!
//! ```json
//! {
//!   "command": "train",
//!   "model_kind": "adc",
//!   "config_hash": "<sha256 of the effective config>",
//!   "master_seed": 42,
//!   "seeds": { "snr_10/common_init": 123, ... },
//!   "files": [ { "path": "snr_10/nlr.json", "bytes": 1234, "sha256": "..." } ]
//! }
//! ```
//!
//! Paths are relative to the manifest's directory and sorted. No timestamps
//! are recorded, so rerunning a command reproduces the manifest byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub model_kind: Option<String>,
    pub config_hash: Option<String>,
    pub master_seed: Option<u64>,
    pub seeds: BTreeMap<String, u64>,
    pub files: Vec<FileEntry>,
}

pub struct RunDir {
    root: PathBuf,
    files: Vec<PathBuf>,
    seeds: BTreeMap<String, u64>,
}

impl RunDir {
    pub fn create(root: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        Ok(RunDir {
            root,
            files: Vec::new(),
            seeds: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Absolute path for `rel`, creating parent directories and recording it
    /// in the inventory.
    pub fn file(&mut self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let path = self.root.join(rel.as_ref());
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        if !self.files.contains(&path) {
            self.files.push(path.clone());
        }
        Ok(path)
    }

    pub fn seed(&mut self, name: impl Into<String>, seed: u64) {
        self.seeds.insert(name.into(), seed);
    }

    pub fn finish(
        self,
        command: &str,
        model_kind: Option<String>,
        config_hash: Option<String>,
        master_seed: Option<u64>,
    ) -> Result<Manifest> {
        let mut files = Vec::with_capacity(self.files.len());
        for path in &self.files {
            let data = std::fs::read(path).with_context(|| format!("reading back {}", path.display()))?;
            let rel = path.strip_prefix(&self.root).unwrap_or(path);
            files.push(FileEntry {
                path: rel.to_string_lossy().replace('\\', "/"),
                bytes: data.len() as u64,
                sha256: hex::encode(Sha256::digest(&data)),
            });
        }
        files.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            command: command.to_string(),
            model_kind,
            config_hash,
            master_seed,
            seeds: self.seeds,
            files,
        };
        let out = self.root.join("MANIFEST.json");
        std::fs::write(&out, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing {}", out.display()))?;
        Ok(manifest)
    }
}
