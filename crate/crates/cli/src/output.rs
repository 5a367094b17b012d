//! Staged output files and the run manifest.
//!
//! Commands write into a hidden staging directory and only move files to
//! their final paths once everything succeeded, so a failing command leaves
//! no partial outputs behind.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliResult;

pub struct Staging {
    out: PathBuf,
    dir: PathBuf,
    files: Vec<PathBuf>,
    committed: bool,
}

impl Staging {
    pub fn new(out: &Path) -> Self {
        Staging {
            out: out.to_path_buf(),
            dir: out.join(format!(".staging-{}", std::process::id())),
            files: Vec::new(),
            committed: false,
        }
    }

    /// Staging location for a file whose final home is `target`.
    pub fn path(&mut self, target: &Path) -> CliResult<PathBuf> {
        std::fs::create_dir_all(&self.dir)?;
        let staged = self.dir.join(format!("{:04}", self.files.len()));
        self.files.push(target.to_path_buf());
        Ok(staged)
    }

    pub fn write(&mut self, target: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
        let p = self.path(target)?;
        std::fs::write(p, bytes)?;
        Ok(())
    }

    /// Moves every staged file into place; returns the final paths.
    pub fn commit(mut self) -> CliResult<Vec<PathBuf>> {
        for (i, target) in self.files.iter().enumerate() {
            if let Some(parent) = target.parent() {
                std::fs::create_dir_all(parent)?;
            }
            let staged = self.dir.join(format!("{i:04}"));
            if std::fs::rename(&staged, target).is_err() {
                std::fs::copy(&staged, target)?;
                std::fs::remove_file(&staged)?;
            }
        }
        self.committed = true;
        let _ = std::fs::remove_dir_all(&self.dir);
        Ok(std::mem::take(&mut self.files))
    }

    pub fn out(&self) -> &Path {
        &self.out
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = std::fs::remove_dir_all(&self.dir);
        }
    }
}

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub versions: Versions,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub demandkit: &'static str,
    pub demandkit_cli: &'static str,
}

fn display(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).display().to_string()
}

pub fn digest_file(out: &Path, p: &Path) -> CliResult<FileDigest> {
    let bytes = std::fs::read(p)?;
    Ok(FileDigest {
        path: display(out, p),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig, inputs: &[PathBuf]) -> CliResult<Self> {
        let mut inputs = inputs
            .iter()
            .map(|p| digest_file(&cfg.out, p))
            .collect::<CliResult<Vec<_>>>()?;
        inputs.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(Manifest {
            command: command.to_string(),
            config_sha256: cfg.hash(),
            seed: cfg.seed,
            versions: Versions {
                demandkit: demandkit::VERSION,
                demandkit_cli: env!("CARGO_PKG_VERSION"),
            },
            inputs,
            outputs: Vec::new(),
        })
    }

    /// Records the files staged so far and stages the manifest itself plus a
    /// snapshot of the resolved config.
    pub fn stage(mut self, staging: &mut Staging, cfg: &RunConfig) -> CliResult<()> {
        let out = staging.out().to_path_buf();
        let slug = self.command.replace(' ', "_");
        let config_path = out.join(format!("config_{slug}.toml"));
        self.outputs = staging.files.iter().map(|p| display(&out, p)).collect();
        self.outputs.push(display(&out, &config_path));
        self.outputs.sort();
        staging.write(&config_path, cfg.canonical())?;
        let json = serde_json::to_string_pretty(&self).expect("manifest serializes");
        staging.write(&out.join(format!("manifest_{slug}.json")), json + "\n")
    }
}
