//! JSON run reports written by every CLI command.

use crate::metrics;
use crate::trainer::{EpochMetrics, TrainConfig};
use serde::Serialize;
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Versions {
    pub mice: String,
    pub checkpoint_format: u32,
    pub rng: String,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            mice: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format: crate::checkpoint::FORMAT_VERSION,
            rng: crate::numcore::SeededRng::ALGORITHM.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scores {
    pub nmi: f64,
    pub acc: f64,
    pub ari: f64,
}

impl Scores {
    /// Scores of 0-based predictions against 0-based truth.
    pub fn compute(truth: &[usize], pred: &[usize]) -> Result<Self, metrics::MetricError> {
        Ok(Self { nmi: metrics::nmi(truth, pred)?, acc: metrics::acc(truth, pred)?, ari: metrics::ari(truth, pred)? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: String,
    pub config: Option<TrainConfig>,
    pub seed: Option<u64>,
    pub n_points: usize,
    pub epochs: Vec<EpochMetrics>,
    pub final_metrics: Option<Scores>,
    pub nmi_normalization: &'static str,
    /// 1-based cluster per point.
    pub labels: Vec<usize>,
    pub wall_clock_seconds: f64,
    pub versions: Versions,
}

impl RunReport {
    pub fn new(command: &str, config: Option<&TrainConfig>, n_points: usize) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            config: config.cloned(),
            seed: config.map(|c| c.seed),
            n_points,
            epochs: Vec::new(),
            final_metrics: None,
            nmi_normalization: "arithmetic",
            labels: Vec::new(),
            wall_clock_seconds: 0.0,
            versions: Versions::default(),
        }
    }

    /// Record 0-based predictions (stored 1-based) and score them if truth is known.
    pub fn set_labels(&mut self, pred: &[usize], truth: Option<&[usize]>) -> Result<(), metrics::MetricError> {
        self.labels = pred.iter().map(|l| l + 1).collect();
        self.final_metrics = truth.map(|t| Scores::compute(t, pred)).transpose()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json() + "\n")
    }
}
