//! Sidecar provenance manifests. Primary outputs must be byte-identical
//! across re-runs, so anything time-dependent lives here and only here.

use crate::CliError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_name: String,
    pub tool_version: String,
    pub command: String,
    /// SHA-256 over the effective config JSON, after flag overrides.
    pub config_hash: String,
    /// Backbone checkpoint used, when the command involves one; eval and
    /// analyze fall back to this path when --backbone is omitted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backbone_path: Option<String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub created_unix_ms: u128,
}

impl Manifest {
    pub fn new(command: &str, config_hash: String) -> Self {
        let created_unix_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        Manifest {
            tool_name: "promptune".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash,
            backbone_path: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            created_unix_ms,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(digest_entry(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> Result<(), CliError> {
        self.outputs.push(digest_entry(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::user(format!("manifest serialization failed: {e}")))?;
        text.push('\n');
        std::fs::write(path, text)
            .map_err(|e| CliError::user(format!("cannot write {}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::user(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::user(format!("malformed manifest {}: {e}", path.display())))
    }
}

fn digest_entry(path: &Path) -> Result<FileDigest, CliError> {
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: file_sha256(path)?,
    })
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::user(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Hash of the effective configuration, after defaults and flag overrides.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    hex(&Sha256::digest(&bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Locates the sidecar manifest for a run directory.
pub fn run_manifest_path(run_dir: &Path) -> PathBuf {
    run_dir.join("manifest.json")
}
