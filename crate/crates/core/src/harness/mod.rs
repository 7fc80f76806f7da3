//! Configuration-driven experiments: training trials, sweeps, reports,
//! replay, and the acceptance suite.

mod config;
mod report;
pub mod suite;
mod train;

pub use config::{
    resolve_mnist_dir, AttackConfig, AuditConfig, DatasetConfig, ExperimentConfig, GridPoint,
    ModelConfig, ReportMode, SweepAxes,
};
pub use report::{AxisValue, ReportFormat, ReportSet, RunReport, TrialReport};
pub use train::{
    load_datasets, run_experiment, run_experiment_with, run_sweep, run_trial, trial_stream,
    Datasets, TrialRun,
};

use crate::error::{Error, Result};

fn bits_differ(a: f64, b: f64) -> bool {
    !(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()))
}

fn first_float_diff(what: &str, a: &[f64], b: &[f64]) -> Option<String> {
    if a.len() != b.len() {
        return Some(format!("{what}: {} values recorded, {} replayed", a.len(), b.len()));
    }
    a.iter()
        .zip(b)
        .position(|(&x, &y)| bits_differ(x, y))
        .map(|i| format!("{what}[{i}]: recorded {:?}, replayed {:?}", a[i], b[i]))
}

/// First difference between two trial reports, if any.
pub fn trial_divergence(recorded: &TrialReport, replayed: &TrialReport) -> Option<String> {
    let (m, n) = (&recorded.metrics, &replayed.metrics);
    first_float_diff("accuracy", &[m.accuracy], &[n.accuracy])
        .or_else(|| first_float_diff("precision", &m.precision, &n.precision))
        .or_else(|| first_float_diff("recall", &m.recall, &n.recall))
        .or_else(|| first_float_diff("val_loss", &recorded.val_loss, &replayed.val_loss))
        .or_else(|| first_float_diff("train_loss", &recorded.train_loss, &replayed.train_loss))
        .or_else(|| {
            (recorded.seed != replayed.seed)
                .then(|| format!("seed: recorded {}, replayed {}", recorded.seed, replayed.seed))
        })
        .or_else(|| {
            (recorded.audit != replayed.audit)
                .then(|| format!("audit: recorded {:?}, replayed {:?}", recorded.audit, replayed.audit))
        })
        .or_else(|| {
            (recorded.fired != replayed.fired)
                .then(|| format!("fired: recorded {:?}, replayed {:?}", recorded.fired, replayed.fired))
        })
}

/// First difference between a recorded run and a fresh one, ignoring wall clock.
pub fn run_divergence(recorded: &RunReport, replayed: &RunReport) -> Option<String> {
    if recorded.trials.len() != replayed.trials.len() {
        return Some(format!(
            "{} trials recorded, {} replayed",
            recorded.trials.len(),
            replayed.trials.len()
        ));
    }
    recorded
        .trials
        .iter()
        .zip(&replayed.trials)
        .find_map(|(a, b)| trial_divergence(a, b).map(|d| format!("trial {}: {d}", a.trial)))
        .or_else(|| {
            let (a, b) = (&recorded.aggregate, &replayed.aggregate);
            first_float_diff("mean accuracy", &[a.accuracy], &[b.accuracy])
                .or_else(|| first_float_diff("mean precision", &a.precision, &b.precision))
                .or_else(|| first_float_diff("mean recall", &a.recall, &b.recall))
        })
        .or_else(|| {
            (recorded.best_trial != replayed.best_trial).then(|| {
                format!("best trial: recorded {:?}, replayed {:?}", recorded.best_trial, replayed.best_trial)
            })
        })
}

/// Re-executes every run from its config echo and checks that all recorded
/// numbers come out bit-identical. Returns the fresh reports.
pub fn replay(set: &ReportSet, threads: usize) -> Result<Vec<RunReport>> {
    let mut fresh = Vec::with_capacity(set.runs.len());
    for (i, run) in set.runs.iter().enumerate() {
        let mut again = run_experiment(&run.config, threads)?;
        again.axes = run.axes.clone();
        if let Some(d) = run_divergence(run, &again) {
            let at: Vec<String> = run.axes.iter().map(|a| format!("{}={}", a.name, a.value)).collect();
            let at = if at.is_empty() { String::new() } else { format!(" ({})", at.join(", ")) };
            return Err(Error::Replay(format!("run {i}{at}, {d}")));
        }
        fresh.push(again);
    }
    Ok(fresh)
}
