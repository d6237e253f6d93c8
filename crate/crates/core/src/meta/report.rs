//! Versioned JSON run reports and their CSV companions.
//!
//! A report directory holds `report.json`, `reliability.csv` (one row per
//! confidence bin) and `omega_trajectory.csv` (`iter,component_index,value`).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::losses::HyperParams;
use crate::meta::config::TrainConfig;
use crate::meta::step::TrajectoryPoint;
use crate::metrics::BinStats;

pub const REPORT_FORMAT: &str = "metacal-run-report";
pub const REPORT_VERSION: u32 = 1;
pub const TRAJECTORY_CSV_HEADER: &str = "iter,component_index,value";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSummary {
    pub train_n: usize,
    pub val_n: usize,
    pub metaval_n: usize,
    pub test_n: usize,
    pub num_features: usize,
    pub num_classes: usize,
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Mean outer loss over the epoch's meta updates.
    pub meta_loss: Option<f64>,
    pub val_error: f64,
    pub val_ece: f64,
    pub val_nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestMetrics {
    pub error: f64,
    pub ece: f64,
    /// Absent when the test set has fewer samples than bins.
    pub aece: Option<f64>,
    pub dece: f64,
    pub nll: f64,
    pub brier: f64,
    /// Temperature fitted on the validation split.
    pub temperature: f64,
    pub ece_after_temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainMetrics {
    pub domain: String,
    pub error: f64,
    pub ece: f64,
    pub nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainReport {
    pub domains: Vec<DomainMetrics>,
    pub mean_ece: f64,
    pub worst_ece: f64,
    pub mean_error: f64,
    pub worst_error: f64,
}

impl DomainReport {
    pub fn new(domains: Vec<DomainMetrics>) -> Self {
        let n = domains.len().max(1) as f64;
        Self {
            mean_ece: domains.iter().map(|d| d.ece).sum::<f64>() / n,
            worst_ece: domains.iter().map(|d| d.ece).fold(0.0, f64::max),
            mean_error: domains.iter().map(|d| d.error).sum::<f64>() / n,
            worst_error: domains.iter().map(|d| d.error).fold(0.0, f64::max),
            domains,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub format: String,
    pub version: u32,
    /// `train` or `retrain`.
    pub mode: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub data: DataSummary,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters produced the test metrics.
    pub best_epoch: usize,
    pub test: TestMetrics,
    pub reliability: BinStats,
    /// Hyper-parameters in effect at the end of training.
    pub omega: Option<HyperParams>,
    pub meta_updates: u64,
    /// Every `meta.trajectory_stride`-th point of the `ω` trajectory.
    pub omega_trajectory: Vec<TrajectoryPoint>,
    pub corrupted_domains: Option<DomainReport>,
}

fn unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Format(format!("{name} must lie in [0, 1], got {v}")))
    }
}

impl RunReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mode: &str,
        config: TrainConfig,
        data: DataSummary,
        epochs: Vec<EpochLog>,
        best_epoch: usize,
        test: TestMetrics,
        reliability: BinStats,
        omega: Option<HyperParams>,
        omega_trajectory: Vec<TrajectoryPoint>,
        meta_updates: u64,
        corrupted_domains: Option<DomainReport>,
    ) -> Self {
        Self {
            format: REPORT_FORMAT.into(),
            version: REPORT_VERSION,
            mode: mode.into(),
            seed: config.seed,
            config,
            data,
            epochs,
            best_epoch,
            test,
            reliability,
            omega,
            meta_updates,
            omega_trajectory,
            corrupted_domains,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != REPORT_FORMAT {
            return Err(Error::Format(format!("not a run report: format `{}`", self.format)));
        }
        if self.version != REPORT_VERSION {
            return Err(Error::Format(format!("unsupported report version {}", self.version)));
        }
        if self.mode != "train" && self.mode != "retrain" {
            return Err(Error::Format(format!("unknown report mode `{}`", self.mode)));
        }
        if self.seed != self.config.seed {
            return Err(Error::Format("seed does not match the config echo".into()));
        }
        self.config
            .validate()
            .map_err(|e| Error::Format(format!("config echo: {e}")))?;
        if self.epochs.len() != self.config.optim.epochs {
            return Err(Error::Format(format!(
                "{} epoch logs for {} epochs",
                self.epochs.len(),
                self.config.optim.epochs
            )));
        }
        if self.epochs.iter().enumerate().any(|(i, e)| e.epoch != i) {
            return Err(Error::Format("epoch logs out of order".into()));
        }
        if self.best_epoch >= self.epochs.len() {
            return Err(Error::Format(format!("best epoch {} out of range", self.best_epoch)));
        }
        let t = &self.test;
        unit("test.error", t.error)?;
        unit("test.ece", t.ece)?;
        unit("test.dece", t.dece)?;
        unit("test.ece_after_temperature", t.ece_after_temperature)?;
        if let Some(a) = t.aece {
            unit("test.aece", a)?;
        }
        if !(t.nll >= 0.0 && t.nll.is_finite() && (0.0..=2.0).contains(&t.brier) && t.temperature > 0.0) {
            return Err(Error::Format("test scores out of range".into()));
        }
        if self.reliability.bins.len() != self.config.eval.bins {
            return Err(Error::Format(format!(
                "{} reliability bins, config has {}",
                self.reliability.bins.len(),
                self.config.eval.bins
            )));
        }
        if self.reliability.total() != self.data.test_n {
            return Err(Error::Format("reliability counts do not cover the test set".into()));
        }
        if let Some(om) = &self.omega {
            om.validate().map_err(|e| Error::Format(format!("omega: {e}")))?;
            if self.omega_trajectory.iter().any(|p| p.values.len() != om.values.len()) {
                return Err(Error::Format("trajectory length does not match omega".into()));
            }
        } else if !self.omega_trajectory.is_empty() {
            return Err(Error::Format("trajectory without omega".into()));
        }
        if self.omega_trajectory.windows(2).any(|w| w[0].iter >= w[1].iter)
            || self
                .omega_trajectory
                .last()
                .is_some_and(|p| p.iter >= self.meta_updates)
        {
            return Err(Error::Format("trajectory iterations must increase".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: RunReport = serde_json::from_str(text)?;
        report.validate()?;
        Ok(report)
    }

    /// `iter,component_index,value` rows of the recorded trajectory.
    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from(TRAJECTORY_CSV_HEADER);
        out.push('\n');
        for p in &self.omega_trajectory {
            for (i, v) in p.values.iter().enumerate() {
                let _ = writeln!(out, "{},{i},{v:?}", p.iter);
            }
        }
        out
    }
}

/// Writes `report.json`, `reliability.csv` and `omega_trajectory.csv` into
/// `dir`, each atomically.
pub fn write_report(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let files = [
        ("report.json", report.to_json()?),
        ("reliability.csv", report.reliability.to_csv()),
        ("omega_trajectory.csv", report.trajectory_csv()),
    ];
    let mut paths = Vec::with_capacity(files.len());
    for (name, body) in files {
        let path = dir.join(name);
        write_atomic(&path, body.as_bytes())?;
        paths.push(path);
    }
    Ok(paths)
}
