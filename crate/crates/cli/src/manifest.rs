//! Run manifests: every command records its resolved configuration, a hash of
//! it, and the tool version, so outputs can be traced and reproduced.

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Serialize)]
pub struct Manifest<T: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: T,
    pub config_sha256: String,
}

pub fn write_manifest<T: Serialize>(path: &Path, command: &str, config: T) -> anyhow::Result<()> {
    let config_json = serde_json::to_string(&config)?;
    let mut hasher = Sha256::new();
    hasher.update(config_json.as_bytes());
    let manifest = Manifest {
        tool: "falco",
        version: env!("CARGO_PKG_VERSION"),
        command: command.to_string(),
        config,
        config_sha256: format!("{:x}", hasher.finalize()),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}
