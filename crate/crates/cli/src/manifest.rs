use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliResult, Context};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written once into every output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.push(FileDigest { path: path.display().to_string(), sha256: digest_file(path)? });
        Ok(())
    }

    pub fn time(&mut self, stage: &str, seconds: f64) {
        *self.timings.entry(stage.into()).or_default() += seconds;
    }

    /// Digest the listed outputs (relative to `dir`) and write the manifest.
    pub fn finish(mut self, dir: &Path, outputs: &[PathBuf]) -> CliResult<()> {
        for o in outputs {
            let rel = o.strip_prefix(dir).unwrap_or(o);
            self.outputs.push(FileDigest { path: rel.display().to_string(), sha256: digest_file(o)? });
        }
        let text = serde_json::to_string_pretty(&self).context("manifest")?;
        std::fs::write(dir.join(MANIFEST), text).context("writing manifest")
    }
}

pub fn digest_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).context(&format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
