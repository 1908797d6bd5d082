//! `manifest.json` written into every output directory: schema-versioned
//! record of the command, its inputs (with content hashes), and outputs.

use std::path::Path;

use anyhow::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct Manifest<E: Serialize> {
    pub schema_version: u32,
    pub command: String,
    pub seed: u64,
    pub precision: String,
    pub entries: Vec<E>,
}

impl<E: Serialize> Manifest<E> {
    pub fn new(command: &str, seed: u64, precision: &str, entries: Vec<E>) -> Self {
        Manifest {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            seed,
            precision: precision.to_string(),
            entries,
        }
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(out_dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}

pub fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}
