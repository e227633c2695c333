//! `<output>.manifest.json` written next to every artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    /// Config path → sha256 of its bytes.
    pub config_hashes: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub version: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
}

pub struct ManifestBuilder {
    started: Instant,
    manifest: RunManifest,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

impl ManifestBuilder {
    pub fn start() -> Self {
        Self {
            started: Instant::now(),
            manifest: RunManifest {
                command_line: std::env::args().collect(),
                config_hashes: BTreeMap::new(),
                seed: None,
                version: env!("CARGO_PKG_VERSION").to_string(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                wall_clock_seconds: 0.0,
            },
        }
    }

    pub fn config(&mut self, path: &Path) -> CliResult<()> {
        let hash = sha256_file(path)?;
        self.manifest.config_hashes.insert(path.display().to_string(), hash);
        self.input(path);
        Ok(())
    }

    pub fn input(&mut self, path: &Path) {
        self.manifest.inputs.push(path.display().to_string());
    }

    pub fn output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.display().to_string());
    }

    pub fn seed(&mut self, seed: u64) {
        self.manifest.seed = Some(seed);
    }

    /// Writes the manifest beside `primary`.
    pub fn finish(mut self, primary: &Path) -> CliResult<PathBuf> {
        self.manifest.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        let path = manifest_path(primary);
        crate::write_json(&path, &self.manifest)?;
        Ok(path)
    }
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let trimmed = output.to_string_lossy().trim_end_matches('/').to_string();
    PathBuf::from(format!("{trimmed}.manifest.json"))
}
