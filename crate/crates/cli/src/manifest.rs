use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use geomtext::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Record of one run: effective config, seed, and SHA-256 of every input
/// and output. Contains nothing time-dependent, so reruns reproduce it.
#[derive(Serialize)]
pub struct Manifest {
    command: &'static str,
    seed: u64,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    artifacts: BTreeMap<String, String>,
    #[serde(skip)]
    out_dir: PathBuf,
}

impl Manifest {
    pub fn new(
        command: &'static str,
        out_dir: &Path,
        seed: u64,
        config: &impl Serialize,
    ) -> Result<Self> {
        Ok(Manifest {
            command,
            seed,
            config: serde_json::to_value(config)?,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            out_dir: out_dir.to_path_buf(),
        })
    }

    /// Replaces the config snapshot once the effective config is known.
    pub fn with_config(mut self, config: &impl Serialize) -> Result<Self> {
        self.config = serde_json::to_value(config)?;
        Ok(self)
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path)?;
        self.inputs
            .insert(path.display().to_string(), sha256(&bytes));
        Ok(())
    }

    /// Writes `name` into the output directory and records its hash.
    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        fs::write(&path, bytes.as_ref())?;
        self.artifacts
            .insert(name.to_string(), sha256(bytes.as_ref()));
        Ok(path)
    }

    pub fn finish(self) -> Result<PathBuf> {
        let path = self.out_dir.join(format!("{}.manifest.json", self.command));
        let mut text = serde_json::to_string_pretty(&self)?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }
}
