//! Results manifest written next to every command's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliResult;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Paths relative to the output directory, sorted.
    pub files: Vec<String>,
    pub wall_seconds: f64,
}

impl Manifest {
    pub fn new<T: Serialize>(
        command: &str,
        config: &T,
        config_hash: String,
        seed: u64,
    ) -> CliResult<Self> {
        Ok(Self {
            command: command.to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            config_hash,
            seed,
            config: serde_json::to_value(config)?,
            files: Vec::new(),
            wall_seconds: 0.0,
        })
    }

    pub fn add(&mut self, out_dir: &Path, file: &Path) {
        let rel = file.strip_prefix(out_dir).unwrap_or(file);
        self.files.push(rel.to_string_lossy().replace('\\', "/"));
    }

    pub fn write(mut self, out_dir: &Path) -> CliResult<PathBuf> {
        self.files.sort();
        self.files.dedup();
        let path = out_dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&self)?)?;
        Ok(path)
    }
}
