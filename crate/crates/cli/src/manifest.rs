use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use diagno_core::io::write_json;
use diagno_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    /// Hex SHA-256; `None` for an input that could not be read.
    pub sha256: Option<String>,
}

/// Record of one command run, written before the run starts and rewritten
/// when it ends.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// Seconds since the Unix epoch at the start of the run.
    pub timestamp: u64,
    pub seed: Option<u64>,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn start(
        command: &str,
        seed: Option<u64>,
        config_hash: String,
        config: serde_json::Value,
        inputs: &[PathBuf],
    ) -> Self {
        let inputs = inputs
            .iter()
            .map(|p| FileDigest {
                path: p.display().to_string(),
                sha256: sha256_file(p).ok(),
            })
            .collect();
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            seed,
            config_hash,
            config,
            inputs,
            outputs: Vec::new(),
            status: RunStatus::Running,
            error: None,
        }
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        write_json(&out.join(MANIFEST_FILE), self)
    }

    /// Records the digests of `outputs`, given relative to `out`.
    pub fn succeed(&mut self, out: &Path, outputs: &[PathBuf]) -> Result<()> {
        let mut digests = outputs
            .iter()
            .map(|rel| {
                Ok(FileDigest {
                    path: rel.display().to_string(),
                    sha256: Some(sha256_file(&out.join(rel))?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        digests.sort_by(|a, b| a.path.cmp(&b.path));
        self.outputs = digests;
        self.status = RunStatus::Succeeded;
        Ok(())
    }

    pub fn fail(&mut self, message: String) {
        self.status = RunStatus::Failed;
        self.error = Some(message);
    }
}
