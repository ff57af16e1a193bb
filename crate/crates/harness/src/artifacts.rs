//! Checkpoints, metrics CSV and run reports. Every file carries the config
//! hash of the run that produced it.

use std::path::{Path, PathBuf};

use lfm_core::evaluation::EvalReport;
use lfm_core::search::{MetricsRow, TrilevelState};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const CHECKPOINT_FORMAT: &str = "lfm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const GENOTYPE_FILE: &str = "genotype.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub state: TrilevelState,
}

impl Checkpoint {
    pub fn new(config_hash: &str, state: TrilevelState) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.into(),
            state,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| HarnessError::Runtime(e.to_string()))?;
        write_file(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_file(path)?;
        let ck: Self = serde_json::from_str(&text).map_err(|e| {
            HarnessError::Runtime(format!("{}: not a checkpoint: {e}", path.display()))
        })?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(HarnessError::Runtime(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        Ok(ck)
    }
}

/// The whole metrics file; written in one go so reruns are byte-identical.
pub fn metrics_csv(config_hash: &str, classes: usize, rows: &[MetricsRow]) -> String {
    let mut out = format!(
        "# config_hash {config_hash}\n{}\n",
        MetricsRow::csv_header(classes)
    );
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub genotype: String,
    pub genotype_path: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    pub wall_clock_secs: f64,
    pub iterations: usize,
    /// Supernet (second classifier) accuracy on the validation split.
    pub supernet_val_accuracy: Option<f64>,
    pub evaluation: Option<EvalReport>,
}

impl RunReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json =
            serde_json::to_string_pretty(self).map_err(|e| HarnessError::Runtime(e.to_string()))?;
        write_file(path, json.as_bytes())
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

/// Reads a text file; a missing file is a usage error.
pub fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            HarnessError::Usage(format!("file not found: {}", path.display()))
        }
        _ => HarnessError::io(path, e),
    })
}
