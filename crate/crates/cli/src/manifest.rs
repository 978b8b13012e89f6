//! `manifest.json`: one entry per subcommand run in a directory.
//!
//! File paths are relative to the run directory and no timestamps are
//! stored, so equal configs give byte-identical manifests.

use std::collections::BTreeMap;
use std::path::Path;

use iflab::io::{sha256_file, sha256_hex, write_atomic};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL_NAME: &str = "iflab";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub commands: BTreeMap<String, CommandEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandEntry {
    /// `ok` or `failed`.
    pub status: String,
    pub config: Value,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub settings: BTreeMap<String, Value>,
    pub summary: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self { tool: TOOL_NAME.into(), version: TOOL_VERSION.into(), commands: BTreeMap::new() }
    }
}

impl Manifest {
    /// The directory's manifest, or `None` when it has none.
    pub fn read(dir: &Path) -> Result<Option<Self>, CliError> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map(Some).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
    }

    /// Inserts `entry` under `name`, replacing an earlier run of the same command.
    pub fn record(dir: &Path, name: &str, entry: CommandEntry) -> Result<(), CliError> {
        let mut manifest = Self::read(dir)?.unwrap_or_default();
        manifest.tool = TOOL_NAME.into();
        manifest.version = TOOL_VERSION.into();
        manifest.commands.insert(name.to_string(), entry);
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Other(e.to_string()))?;
        text.push('\n');
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(())
    }
}

pub fn config_hash(config: &Value) -> String {
    sha256_hex(serde_json::to_string(config).expect("JSON values serialize").as_bytes())
}

/// `{relative path: sha256}` for files under `dir`.
pub fn hash_files(dir: &Path, names: &[String]) -> Result<BTreeMap<String, String>, CliError> {
    names
        .iter()
        .map(|name| {
            let path = dir.join(name);
            if !path.exists() {
                return Err(CliError::MissingArtifact(path));
            }
            Ok((name.clone(), sha256_file(&path)?))
        })
        .collect()
}
