//! The JSON-lines training log, one object per optimizer step.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub loss: f64,
    pub acc: f64,
    pub lr: f64,
    /// Images of this step's batch that were dropped by the sampler.
    pub skipped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    /// Opens `path` for appending after dropping every record with
    /// `step >= keep_below`, so a resumed run continues the log seamlessly.
    pub fn open(path: &Path, keep_below: u64) -> Result<Self> {
        let mut kept = String::new();
        if keep_below > 0 && path.exists() {
            let f = File::open(path).map_err(Error::io(path))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(Error::io(path))?;
                let Ok(rec) = serde_json::from_str::<MetricRecord>(&line) else { continue };
                if rec.step < keep_below {
                    kept.push_str(&line);
                    kept.push('\n');
                }
            }
        }
        fs::write(path, kept).map_err(Error::io(path))?;
        let f = OpenOptions::new().append(true).open(path).map_err(Error::io(path))?;
        Ok(MetricsLog { path: path.into(), out: BufWriter::new(f) })
    }

    pub fn append(&mut self, rec: &MetricRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("plain record");
        writeln!(self.out, "{line}").map_err(Error::io(&self.path))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(Error::io(&self.path))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Every record of a log file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Config(format!("{}: {e}", path.display()))))
        .collect()
}
