//! Run manifests: a JSON record written next to every artifact.
//!
//! The manifest hash covers the command, resolved config, seed and input
//! file hashes, so it is known before any output exists and reruns of the
//! same manifest produce the same hash. Artifacts embed it.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use paraformer::container::{sha256_hex, write_atomic};
use paraformer::train::EpochStats;
use serde::Serialize;

use crate::failure::{contract, CmdResult};

#[derive(Clone, Debug, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

impl FileRecord {
    pub fn of(path: &Path) -> CmdResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| contract(format!("cannot read {}: {e}", path.display())))?;
        Ok(Self {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub manifest_hash: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights_hash: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub epochs: Vec<EpochStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<serde_json::Value>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub version: &'static str,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64, inputs: Vec<FileRecord>) -> Self {
        let identity = serde_json::json!({
            "command": command,
            "config": config,
            "seed": seed,
            "inputs": inputs.iter().map(|f| &f.sha256).collect::<Vec<_>>(),
        });
        let manifest_hash = sha256_hex(identity.to_string().as_bytes());
        Self {
            command: command.to_string(),
            manifest_hash,
            config,
            seed,
            inputs,
            outputs: Vec::new(),
            weights_hash: None,
            epochs: Vec::new(),
            metrics: None,
            started_unix: now(),
            finished_unix: 0.0,
            version: env!("CARGO_PKG_VERSION"),
        }
    }

    pub fn sidecar(artifact: &Path) -> PathBuf {
        let mut name = artifact.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        artifact.with_file_name(name)
    }

    /// Records `outputs` and writes the manifest next to the first one.
    pub fn finish(&mut self, outputs: &[&Path]) -> CmdResult<PathBuf> {
        self.outputs = outputs.iter().map(|p| FileRecord::of(p)).collect::<CmdResult<_>>()?;
        self.finished_unix = now();
        let path = Self::sidecar(outputs[0]);
        let text = serde_json::to_string_pretty(self).map_err(|e| contract(e.to_string()))?;
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}
