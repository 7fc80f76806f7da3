//! Run reports: JSON (complete) and CSV (one row per trial plus the mean).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::dropout::{AuditSummary, FiredEvent};
use crate::error::{Error, Result};
use crate::metrics::{nan_as_string, MetricsReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisValue {
    pub name: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    /// Seed of the trial's random stream.
    pub seed: u64,
    pub metrics: MetricsReport,
    /// Mean validation loss after each epoch.
    #[serde(with = "nan_as_string::vec")]
    pub val_loss: Vec<f64>,
    /// Mean training loss over each epoch's batches.
    #[serde(with = "nan_as_string::vec")]
    pub train_loss: Vec<f64>,
    /// Mask audit of the attacked dropout slot.
    pub audit: AuditSummary,
    pub fired: Vec<FiredEvent>,
    /// Whether a one-shot or blind routing fired; absent for other policies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub one_time_fired: Option<bool>,
}

/// Result of one sweep-free config. `config` is enough to replay it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    /// Grid point this run belongs to; empty outside sweeps.
    pub axes: Vec<AxisValue>,
    pub trials: Vec<TrialReport>,
    /// NaN-propagating mean over trials.
    pub aggregate: MetricsReport,
    /// Selected trial when the report mode is `best`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_trial: Option<usize>,
    /// Not part of replay comparisons.
    pub wall_clock_secs: f64,
}

impl RunReport {
    /// Metrics that the configured report mode presents: the mean, or the best trial.
    pub fn headline(&self) -> &MetricsReport {
        match self.best_trial {
            Some(i) => &self.trials[i].metrics,
            None => &self.aggregate,
        }
    }
}

/// What `run` and `sweep` write: one entry per grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSet {
    pub runs: Vec<RunReport>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::config("format", format!("{other:?} is neither csv nor json"))),
        }
    }
}

fn cell(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        v.to_string()
    }
}

impl ReportSet {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Copy with wall-clock times zeroed, for byte-level comparisons.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        for r in &mut out.runs {
            r.wall_clock_secs = 0.0;
        }
        out
    }

    /// Columns: sweep axes, `trial` (index, `mean`, or `best`), accuracy,
    /// `precision_<c>` for every class, then `recall_<c>`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let axes: Vec<String> = self
            .runs
            .first()
            .map(|r| r.axes.iter().map(|a| a.name.clone()).collect())
            .unwrap_or_default();
        let classes = self.runs.first().map_or(0, |r| r.aggregate.precision.len());
        let mut header = axes.clone();
        header.push("trial".into());
        header.push("accuracy".into());
        header.extend((0..classes).map(|c| format!("precision_{c}")));
        header.extend((0..classes).map(|c| format!("recall_{c}")));
        let ser = |e: csv::Error| Error::Serde(e.to_string());
        w.write_record(&header).map_err(ser)?;
        for run in &self.runs {
            if run.axes.len() != axes.len() || run.aggregate.precision.len() != classes {
                return Err(Error::shape("ReportSet::to_csv", "runs disagree on axes or classes"));
            }
            let mut rows: Vec<(String, &MetricsReport)> = run
                .trials
                .iter()
                .map(|t| (t.trial.to_string(), &t.metrics))
                .collect();
            rows.push(("mean".into(), &run.aggregate));
            if let Some(b) = run.best_trial {
                rows.push(("best".into(), &run.trials[b].metrics));
            }
            for (label, m) in rows {
                let mut rec: Vec<String> = run.axes.iter().map(|a| a.value.to_string()).collect();
                rec.push(label);
                rec.push(cell(m.accuracy));
                rec.extend(m.precision.iter().map(|&v| cell(v)));
                rec.extend(m.recall.iter().map(|&v| cell(v)));
                w.write_record(&rec).map_err(ser)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn write(&self, path: &Path, format: ReportFormat) -> Result<()> {
        let text = match format {
            ReportFormat::Json => self.to_json()?,
            ReportFormat::Csv => self.to_csv()?,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
