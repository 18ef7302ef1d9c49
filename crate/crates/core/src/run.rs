//! Run manifests: what was run, with which configuration, and what it wrote.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::jsonl::{self, JsonlError};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// sha256 over the canonical JSON form of `value` (object keys sorted).
pub fn digest<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_value(value).and_then(|v| serde_json::to_vec(&v)).unwrap_or_default();
    hex::encode(Sha256::digest(canonical))
}

pub fn file_digest(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub config_digest: String,
    pub started_at: String,
    #[serde(default)]
    pub finished_at: Option<String>,
    /// Output file name → sha256 of its contents.
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn start<T: Serialize>(subcommand: &str, config: &T) -> Self {
        let config = serde_json::to_value(config).unwrap_or_default();
        Self {
            subcommand: subcommand.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            config_digest: digest(&config),
            config,
            started_at: now(),
            finished_at: None,
            outputs: BTreeMap::new(),
        }
    }

    pub fn file_name(subcommand: &str) -> String {
        format!("manifest.{}.json", subcommand.replace(' ', "-"))
    }

    /// Hashes the named outputs that exist in `run_dir`, stamps the finish
    /// time and writes `manifest.<subcommand>.json` there.
    pub fn finish(mut self, run_dir: &Path, outputs: &[&str]) -> Result<Self, JsonlError> {
        for name in outputs {
            if let Ok(sum) = file_digest(&run_dir.join(name)) {
                self.outputs.insert(name.to_string(), sum);
            }
        }
        self.finished_at = Some(now());
        jsonl::write_json(&run_dir.join(Self::file_name(&self.subcommand)), &self)?;
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self, JsonlError> {
        let text = std::fs::read_to_string(path).map_err(|source| JsonlError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| JsonlError::Malformed {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}
