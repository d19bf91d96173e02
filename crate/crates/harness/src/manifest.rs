//! Run manifests: enough provenance to repeat a run bit for bit in
//! single-threaded mode.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Manifest {
    pub command: String,
    pub args: Vec<String>,
    /// SHA-256 of the configuration file bytes.
    pub config_sha256: Option<String>,
    /// SHA-256 of the input checkpoint.
    pub checkpoint_sha256: Option<String>,
    pub seed: Option<u64>,
    pub threads: usize,
    pub asvit_version: String,
    pub checkpoint_format: u32,
    pub rustc: String,
    pub platform: String,
}

impl Manifest {
    pub fn new(command: &str, threads: usize) -> Self {
        Self {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config_sha256: None,
            checkpoint_sha256: None,
            seed: None,
            threads,
            asvit_version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format: asvit_core::vit::VERSION,
            rustc: env!("ASVIT_RUSTC_VERSION").to_string(),
            platform: format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS),
        }
    }

    pub fn with_config(mut self, bytes: &[u8]) -> Self {
        self.config_sha256 = Some(sha256_hex(bytes));
        self
    }

    pub fn with_checkpoint(mut self, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.checkpoint_sha256 = Some(sha256_hex(&bytes));
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string(self)?;
        std::fs::write(dir.join(MANIFEST_FILE), text).with_context(|| format!("writing manifest in {}", dir.display()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
