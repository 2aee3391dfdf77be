use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CSV_HEADER: &str = "epoch,loss,loss_pc,loss_recon,lr";

/// One row per finished epoch, numbered from 1.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub loss: f64,
    pub loss_pc: f64,
    pub loss_recon: f64,
    pub lr: f64,
    pub visible: usize,
    pub masked: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

/// Record of one command invocation. Written as `<dir>.partial` files after
/// every epoch and renamed into place when the run ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub started: f64,
    pub finished: Option<f64>,
    pub metrics: Vec<MetricRow>,
    pub outputs: Vec<String>,
    /// Command-specific results.
    pub summary: serde_json::Map<String, serde_json::Value>,
}

pub(crate) fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config: serde_json::to_value(config).expect("config serializes"),
            seed,
            started: now(),
            finished: None,
            metrics: Vec::new(),
            outputs: Vec::new(),
            summary: Default::default(),
        }
    }

    pub fn push(&mut self, row: MetricRow) -> Result<()> {
        if let Some(last) = self.metrics.last() {
            if row.epoch <= last.epoch {
                return Err(Error::contract(format!(
                    "metric epoch {} after {}",
                    row.epoch, last.epoch
                )));
            }
        }
        self.metrics.push(row);
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Serialize) {
        self.summary.insert(
            key.to_string(),
            serde_json::to_value(value).expect("summary value serializes"),
        );
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.metrics {
            s += &format!(
                "{},{},{},{},{}\n",
                r.epoch, r.loss, r.loss_pc, r.loss_recon, r.lr
            );
        }
        s
    }

    /// Writes the in-progress manifest and metrics next to their final names.
    pub fn flush_partial(&self, dir: &Path) -> Result<()> {
        fs::write(
            partial(dir, MANIFEST_FILE),
            serde_json::to_string_pretty(self)?,
        )?;
        fs::write(partial(dir, METRICS_FILE), self.csv())?;
        Ok(())
    }

    /// Stamps the end time and moves both files into place.
    pub fn finish(&mut self, dir: &Path) -> Result<()> {
        self.finished = Some(now());
        self.flush_partial(dir)?;
        for name in [MANIFEST_FILE, METRICS_FILE] {
            fs::rename(partial(dir, name), dir.join(name))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

fn partial(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.partial"))
}
