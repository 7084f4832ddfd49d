//! Run manifests: enough to re-execute a command and check its outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{sha256_file, write_atomic};
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    /// The full configuration echo; replaying feeds this back to the command.
    pub config: serde_json::Value,
    pub code_version: String,
    #[serde(default)]
    pub checkpoint_sha256: Option<String>,
    pub seeds: Vec<u64>,
    pub deterministic: bool,
    pub outputs: Vec<OutputFile>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seeds: Vec<u64>, deterministic: bool) -> Self {
        Self {
            command: command.to_string(),
            config,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_sha256: None,
            seeds,
            deterministic,
            outputs: Vec::new(),
        }
    }

    /// Records `rel` (relative to `dir`) with its current hash.
    pub fn add_output(&mut self, dir: &Path, rel: &str) -> Result<()> {
        let sha256 = sha256_file(&dir.join(rel))?;
        self.outputs.retain(|o| o.path != rel);
        self.outputs.push(OutputFile {
            path: rel.to_string(),
            sha256,
        });
        self.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_NAME);
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::malformed(&path, e.to_string()))
    }

    /// Output paths whose bytes in `dir` differ from the recorded hashes.
    pub fn mismatches(&self, dir: &Path) -> Vec<String> {
        self.outputs
            .iter()
            .filter(|o| sha256_file(&dir.join(&o.path)).map(|h| h != o.sha256).unwrap_or(true))
            .map(|o| o.path.clone())
            .collect()
    }
}
