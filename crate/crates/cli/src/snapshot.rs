use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::commands::Command;
use crate::config::AppConfig;
use crate::error::CliError;

/// Everything needed to re-run a command: its arguments and the effective
/// configuration after flag overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snapshot {
    pub version: String,
    pub invocation: Command,
    pub config: AppConfig,
}

pub fn snapshot_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

pub fn write_snapshot(out: &Path, cmd: &Command, cfg: &AppConfig) -> Result<(), CliError> {
    let snap = Snapshot {
        version: env!("CARGO_PKG_VERSION").to_string(),
        invocation: cmd.clone(),
        config: cfg.clone(),
    };
    let path = snapshot_path(out);
    let mut text = serde_json::to_string_pretty(&snap).expect("snapshot serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let snap: Snapshot = serde_json::from_str(&text).map_err(|e| CliError::Parse {
        origin: path.display().to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    crate::config::validate(&snap.config)?;
    Ok(snap)
}
