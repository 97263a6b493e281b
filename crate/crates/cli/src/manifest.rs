//! Run manifests: what a command did and which files it wrote.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use vocalsim::corpus::sha256_hex;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Written to every run directory. Contains no timestamps or absolute paths,
/// so reruns with the same inputs produce the same bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// Effective configuration after defaults, config file and flags.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub corpus_hash: Option<String>,
    pub checkpoint_hashes: BTreeMap<String, String>,
    /// Output file name (relative to the run directory) → sha256.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config,
            seed: None,
            corpus_hash: None,
            checkpoint_hashes: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    /// Hashes `dir/name` into the output list.
    pub fn record_output(&mut self, dir: &Path, name: &str) -> Result<()> {
        let bytes = std::fs::read(dir.join(name))
            .with_context(|| format!("hashing output {name}"))?;
        self.outputs.insert(name.into(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }

    /// Writes `dir/manifest.json` and returns its hash.
    pub fn write(&self, dir: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        std::fs::write(dir.join(MANIFEST_FILE), &bytes)
            .with_context(|| format!("writing manifest in {}", dir.display()))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST_FILE);
        let bytes = std::fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
