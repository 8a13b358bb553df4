use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use protocap::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(sha256_bytes(&bytes))
}

/// Record of one command run. Contains no timestamps, so an identical rerun
/// writes an identical manifest.
#[derive(Serialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub config: serde_json::Value,
    /// Content hash of every file read.
    pub inputs: BTreeMap<String, String>,
    /// Content hash of every primary output.
    pub outputs: BTreeMap<String, String>,
    /// Logs with timings; not hashed.
    pub logs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Result<Self> {
        let config = serde_json::to_value(cfg)?;
        Ok(Manifest {
            command: command.to_string(),
            seed: cfg.seed,
            config_sha256: sha256_bytes(serde_json::to_string(&config)?.as_bytes()),
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            logs: Vec::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Writes `out_dir/manifests/<command>.json` and returns its path.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let dir = out_dir.join("manifests");
        fs::create_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        let path = dir.join(format!("{}.json", self.command));
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    }
}
