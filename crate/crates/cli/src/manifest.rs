//! Reproducibility manifest written next to every subcommand's artifacts.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub schema: u32,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub versions: Versions,
    pub runtime_s: f64,
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub tool: String,
}

impl Manifest {
    pub fn new(command: &str, config_text: &str, seed: u64, runtime_s: f64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(config_text.as_bytes());
        Manifest {
            schema: 1,
            command: command.to_string(),
            config_sha256: format!("{:x}", hasher.finalize()),
            seed,
            versions: Versions { tool: env!("CARGO_PKG_VERSION").to_string() },
            runtime_s,
        }
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }
}
