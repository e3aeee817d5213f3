//! The run manifest: what a command was asked to do and what it produced.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Config file values with command-line overrides applied.
    pub config: RunConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Inputs the command read (datasets, checkpoints, images).
    pub inputs: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, output_dir: &Path) -> Self {
        RunManifest {
            command: command.into(),
            seed: config.train.seed,
            config: config.clone(),
            output_dir: output_dir.into(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
            status: RunStatus::Running,
            error: None,
        }
    }

    pub fn path(&self) -> PathBuf {
        self.output_dir.join(MANIFEST_FILE)
    }

    pub fn write(&self) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("plain manifest");
        write_atomic(&self.path(), json.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Records the outcome of the command and rewrites the file.
    pub fn finish(&mut self, outcome: &Result<Vec<PathBuf>>) -> Result<()> {
        match outcome {
            Ok(artifacts) => {
                self.artifacts = artifacts.clone();
                self.status = RunStatus::Completed;
            }
            Err(e) => {
                self.status = RunStatus::Failed;
                self.error = Some(e.to_string());
            }
        }
        self.write()
    }
}
