//! Run manifests: every CLI invocation records its resolved configuration,
//! seed, inputs/outputs, and output hashes. Manifests contain nothing
//! time-dependent, so re-running an identical command reproduces an
//! identical manifest.

use crate::bank::hex_string;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub seed: u64,
    /// Resolved configuration snapshot, flag name to rendered value.
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// SHA-256 of each output file, path to hex digest.
    pub artifact_hashes: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(subcommand: &str, seed: u64) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            seed,
            config: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            artifact_hashes: BTreeMap::new(),
        }
    }

    pub fn config_entry(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.to_string(), value.to_string());
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    /// Registers an output and hashes its current contents.
    pub fn output(&mut self, path: &Path) -> crate::Result<()> {
        let display = path.display().to_string();
        let digest = hash_file(path)?;
        self.outputs.push(display.clone());
        self.artifact_hashes.insert(display, digest);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> crate::Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

pub fn hash_file(path: &Path) -> crate::Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}
