use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::PipelineConfig;
use crate::error::CliError;

/// `manifest.json` written into every run directory.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: PipelineConfig,
    pub inputs: BTreeMap<String, String>,
    /// Paths relative to the run directory, sorted.
    pub outputs: Vec<String>,
}

/// Collects the inputs and outputs of one command run.
pub struct Run {
    pub dir: PathBuf,
    command: String,
    cfg: PipelineConfig,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl Run {
    pub fn new(command: &str, dir: &Path, cfg: &PipelineConfig) -> Result<Self, CliError> {
        if dir.is_file() {
            return Err(CliError::Usage(format!("--out {} is a file", dir.display())));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            command: command.into(),
            cfg: cfg.clone(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    /// Records an input and refuses run directories that overlap it.
    pub fn input(&mut self, name: &str, path: &Path) -> Result<(), CliError> {
        let (a, b) = (canonical(&self.dir), canonical(path));
        if a.starts_with(&b) || (path.is_dir() && b.starts_with(&a)) {
            return Err(CliError::Usage(format!(
                "--out {} overlaps input {}; commands never write into their inputs",
                self.dir.display(),
                path.display()
            )));
        }
        self.inputs.insert(name.into(), path.display().to_string());
        Ok(())
    }

    /// Absolute path for a run-relative output, recorded in the manifest.
    pub fn output(&mut self, rel: impl AsRef<Path>) -> PathBuf {
        let rel = rel.as_ref();
        self.outputs.push(rel.to_string_lossy().replace('\\', "/"));
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            // Writers create parents too; this covers writers that do not.
            let _ = std::fs::create_dir_all(parent);
        }
        path
    }

    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        self.outputs.sort();
        self.outputs.dedup();
        let m = Manifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION").into(),
            seed: self.cfg.seed,
            config_hash: self.cfg.hash(),
            config: self.cfg,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let path = self.dir.join("manifest.json");
        diffseg::io::write_json(&path, &m)?;
        Ok(path)
    }
}

fn canonical(p: &Path) -> PathBuf {
    std::fs::canonicalize(p)
        .or_else(|_| std::path::absolute(p))
        .unwrap_or_else(|_| p.to_path_buf())
}
