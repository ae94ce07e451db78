//! Per-run manifests: resolved config plus content digests of every input
//! and output file. No timestamps or host details, so a rerun with the same
//! inputs writes the same bytes.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileDigest>,
    pub warnings: Vec<String>,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            tool: "fematch",
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            config: config.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> anyhow::Result<()> {
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    /// Output directory of the run.
    pub fn out_dir(&self) -> &Path {
        &self.config.out
    }

    /// Full path for an output named relative to the output directory.
    pub fn output_path(&self, name: &str) -> PathBuf {
        self.config.out.join(name)
    }

    /// Record an output already written under the output directory.
    pub fn add_output(&mut self, name: &str) -> anyhow::Result<()> {
        let sha256 = sha256_file(&self.output_path(name))?;
        self.outputs.push(FileDigest {
            path: name.into(),
            sha256,
        });
        Ok(())
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        let message = message.into();
        log::warn!("{message}");
        self.warnings.push(message);
    }

    /// Writes `<command>.manifest.json` into the output directory.
    pub fn write(mut self) -> anyhow::Result<PathBuf> {
        self.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let path = self.output_path(&format!("{}.manifest.json", self.command));
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }
}
