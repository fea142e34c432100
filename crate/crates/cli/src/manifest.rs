use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub seconds: f64,
}

/// Provenance record written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub stages: Vec<Stage>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn digest_file(path: &Path) -> CliResult<FileDigest> {
    let bytes = fs::read(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

pub struct ManifestBuilder {
    manifest: RunManifest,
    outputs: Vec<PathBuf>,
    clock: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        Self {
            manifest: RunManifest {
                tool: "dpgen".into(),
                version: env!("CARGO_PKG_VERSION").into(),
                command: command.into(),
                config: Value::Null,
                seed: None,
                inputs: Vec::new(),
                outputs: Vec::new(),
                stages: Vec::new(),
            },
            outputs: Vec::new(),
            clock: Instant::now(),
        }
    }

    pub fn config(&mut self, config: Value, seed: Option<u64>) {
        self.manifest.config = config;
        self.manifest.seed = seed;
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        self.manifest.inputs.push(digest_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    /// Closes the current stage, timing it from the previous one.
    pub fn stage(&mut self, name: &str) {
        self.manifest.stages.push(Stage {
            name: name.into(),
            seconds: self.clock.elapsed().as_secs_f64(),
        });
        self.clock = Instant::now();
    }

    /// Digests the outputs and writes `dir/manifest.json` atomically.
    pub fn finish(mut self, dir: &Path) -> CliResult<RunManifest> {
        for p in &self.outputs {
            self.manifest.outputs.push(digest_file(p)?);
        }
        let path = dir.join("manifest.json");
        dpgen::io::write_atomic(&path, &to_json_bytes(&self.manifest)?)?;
        Ok(self.manifest)
    }
}

/// Pretty JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}
