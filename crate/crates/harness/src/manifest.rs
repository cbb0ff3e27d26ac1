use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Versions {
    pub smds_core: &'static str,
    pub smds_harness: &'static str,
}

/// Written as `manifest.json` next to every command's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub workers: usize,
    pub inputs: Vec<FileDigest>,
    /// Relative to the output directory.
    pub outputs: Vec<PathBuf>,
    pub versions: Versions,
    pub notes: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Digests every regular file in `path` (sorted), or `path` itself.
pub fn digest_inputs(path: &Path) -> Result<Vec<FileDigest>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| HarnessError::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        files
            .into_iter()
            .map(|p| Ok(FileDigest { sha256: sha256_file(&p)?, path: p }))
            .collect()
    } else {
        Ok(vec![FileDigest {
            sha256: sha256_file(path)?,
            path: path.to_path_buf(),
        }])
    }
}

impl Manifest {
    pub fn new(command: &str, cfg: &ExperimentConfig, workers: usize) -> Self {
        Self {
            command: command.to_string(),
            config_hash: cfg.hash(),
            config: cfg.clone(),
            seed: cfg.seed,
            workers,
            inputs: Vec::new(),
            outputs: Vec::new(),
            versions: Versions {
                smds_core: smds_core::VERSION,
                smds_harness: env!("CARGO_PKG_VERSION"),
            },
            notes: Vec::new(),
        }
    }

    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let p = out.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&p, text + "\n").map_err(|e| HarnessError::io(&p, e))?;
        Ok(p)
    }
}
