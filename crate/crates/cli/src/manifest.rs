//! One line per run in `manifest.log`, enough to reproduce the outputs.

use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use hpaf_core::{Error, Result};

use crate::config::PipelineConfig;

pub const MANIFEST: &str = "manifest.log";

pub fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// SHA-256 of the canonical config text.
pub fn config_hash(cfg: &PipelineConfig) -> String {
    hex::encode(Sha256::digest(cfg.to_text().as_bytes()))
}

pub fn version() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

pub fn line(command: &str, cfg: &PipelineConfig, started: u64, finished: u64, exit: u8) -> String {
    format!(
        "command={command} version={} config_sha256={} seed={} started={started} finished={finished} exit={exit}\n",
        version(),
        config_hash(cfg),
        cfg.seed
    )
}

pub fn append(
    dir: &Path,
    command: &str,
    cfg: &PipelineConfig,
    started: u64,
    exit: u8,
) -> Result<()> {
    let path = dir.join(MANIFEST);
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    f.write_all(line(command, cfg, started, now(), exit).as_bytes())
        .map_err(|e| Error::io(&path, e))
}
