//! Per-run metric records, one JSON object per line.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub dataset: String,
    pub horizon: usize,
    pub seed: u64,
    pub rmse: f64,
    /// `null` when no test point crosses its peak threshold.
    pub peak_time_error: Option<f64>,
    pub wall_time: f64,
    pub persistence_rmse: f64,
    pub persistence_peak_time_error: Option<f64>,
    /// Epoch of the retained parameters; absent for evaluation-only runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
}

impl MetricsRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize to JSON")
    }
}

pub fn append(path: &Path, record: &MetricsRecord) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", record.to_line()).map_err(|e| Error::io(path, e))
}

pub fn read_all(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, i as u64 + 1, e.to_string())))
        .collect()
}
