use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Resolved configuration of one run, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest<C: Serialize> {
    pub command: &'static str,
    pub version: &'static str,
    pub seed: u64,
    pub jobs: usize,
    pub config: C,
    pub degradations: Vec<String>,
}

impl<C: Serialize> RunManifest<C> {
    pub fn new(command: &'static str, seed: u64, jobs: usize, config: C) -> Self {
        Self { command, version: env!("CARGO_PKG_VERSION"), seed, jobs, config, degradations: Vec::new() }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        ovseg::dataset::write_json(&dir.join(MANIFEST_FILE), self)?;
        Ok(())
    }
}
