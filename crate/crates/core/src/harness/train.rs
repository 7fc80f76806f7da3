use std::time::Instant;

use rayon::prelude::*;

use super::config::{resolve_mnist_dir, DatasetConfig, ExperimentConfig, GridPoint, ReportMode};
use super::report::{AxisValue, RunReport, TrialReport};
use crate::data::{synth_blobs, BatchPlan, BlobSpec, LabeledDataset, MnistFiles};
use crate::dropout::{MaskPolicy, PolicyDriver, SlotPolicy};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::nn::{softmax_cross_entropy, AdamState, Mode, Network, NoDropout};
use crate::rng::RngStream;

/// Training file (split into train/validation per trial) and test file.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    match &cfg.dataset {
        DatasetConfig::Mnist { dir, train_limit } => {
            let dir = resolve_mnist_dir(dir.as_deref());
            let files = MnistFiles::in_dir(&dir);
            let (mut train, test) = files.load()?;
            if let Some(n) = *train_limit {
                if n == 0 || n > train.len() {
                    return Err(Error::config("dataset.train_limit", format!("{n} not in 1..={}", train.len())));
                }
                train = train.subset(&(0..n).collect::<Vec<_>>());
            }
            Ok(Datasets { train, test })
        }
        DatasetConfig::Blobs {
            spec,
            test_per_class,
        } => {
            let master = RngStream::new(cfg.seed);
            let train = synth_blobs(spec, &mut master.child("data/train"))?;
            let test_spec = BlobSpec {
                per_class: *test_per_class,
                ..spec.clone()
            };
            let test = synth_blobs(&test_spec, &mut master.child("data/test"))?;
            Ok(Datasets { train, test })
        }
    }
}

/// The trained network alongside its report, for callers that inspect it.
pub struct TrialRun {
    pub report: TrialReport,
    pub network: Network,
}

/// Random stream of trial `t`: a child of the master seed, so adding trials
/// never changes earlier ones.
pub fn trial_stream(seed: u64, trial: usize) -> RngStream {
    RngStream::new(seed).child(&format!("trial/{trial}"))
}

fn mean_loss(net: &Network, ds: &LabeledDataset, indices: &[usize], chunk: usize) -> Result<f64> {
    if indices.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for part in indices.chunks(chunk) {
        let (x, y) = ds.gather(part);
        let pass = net.forward(&x, Mode::Eval, &mut NoDropout)?;
        let (loss, _) = softmax_cross_entropy(pass.logits(), &y)?;
        total += loss * part.len() as f64;
    }
    Ok(total / indices.len() as f64)
}

/// Trains and evaluates one trial of a sweep-free config.
pub fn run_trial(cfg: &ExperimentConfig, data: &Datasets, trial: usize) -> Result<TrialRun> {
    let stream = trial_stream(cfg.seed, trial);
    let spec = cfg.model_spec()?;
    let attacked = cfg.attacked_slot(&spec)?;
    if spec.input_width() != data.train.dim() || spec.classes() != data.train.class_count {
        return Err(Error::shape("run_trial", "dataset does not match the model"));
    }
    let slots = (0..spec.dropout.len())
        .map(|s| {
            SlotPolicy::new(if s == attacked {
                cfg.attack.policy.clone()
            } else {
                MaskPolicy::Honest
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut net = Network::init(spec, &mut stream.child("init"))?;
    let plan = BatchPlan::new(data.train.len(), cfg.train_frac, cfg.batch_size, &stream.child("batches"))?;
    let mut driver = PolicyDriver::new(slots, &stream.child("dropout"), cfg.audit.dump_masks);
    let mut adam = AdamState::default();
    let mut val_loss = Vec::with_capacity(cfg.epochs);
    let mut train_loss = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut sum = 0.0;
        let mut seen = 0usize;
        for (b, idx) in plan.epoch_batches(epoch).iter().enumerate() {
            let (x, y) = data.train.gather(idx);
            driver.begin_batch(epoch, b, &y);
            let pass = net.forward(&x, Mode::Train, &mut driver)?;
            let (loss, dlogits) = softmax_cross_entropy(pass.logits(), &y)?;
            let grads = net.backward(&pass, &dlogits)?;
            net.apply_adam(&grads, &mut adam, &cfg.optimizer)?;
            sum += loss * idx.len() as f64;
            seen += idx.len();
        }
        train_loss.push(sum / seen as f64);
        val_loss.push(mean_loss(&net, &data.train, &plan.validation, cfg.eval_chunk)?);
        log::info!(
            "{} trial {trial} epoch {epoch}: train loss {:.4}, validation loss {:.4}",
            cfg.name,
            train_loss[epoch - 1],
            val_loss[epoch - 1]
        );
    }

    let one_time_fired = driver.slots()[attacked].one_time_status();
    if one_time_fired == Some(false) {
        log::warn!("{} trial {trial}: one-time routing never fired", cfg.name);
    }
    let audit_log = driver.into_audit();
    if let Some(template) = &cfg.audit.csv {
        let name = template.to_string_lossy().replace("{trial}", &trial.to_string());
        audit_log.write_csv(std::path::Path::new(&name))?;
        if cfg.audit.dump_masks {
            audit_log.write_mask_dump(std::path::Path::new(&format!("{name}.masks")))?;
        }
    }
    let cm = evaluate(&net, &data.test, cfg.eval_chunk)?;
    let metrics = MetricsReport::from_confusion(&cm);
    log::info!("{} trial {trial}: test accuracy {:.4}", cfg.name, metrics.accuracy);
    Ok(TrialRun {
        report: TrialReport {
            trial,
            seed: stream.seed(),
            metrics,
            val_loss,
            train_loss,
            audit: audit_log.slot_summary(attacked),
            fired: audit_log.fired,
            one_time_fired,
        },
        network: net,
    })
}

/// Trains every trial of a sweep-free config, in parallel over `threads`
/// workers (0 = rayon default). Results are merged in trial order.
pub fn run_experiment_with(cfg: &ExperimentConfig, data: &Datasets, threads: usize) -> Result<RunReport> {
    if cfg.sweep.is_some() {
        return Err(Error::config("sweep", "use run_sweep for configs with sweep axes"));
    }
    cfg.validate()?;
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config("threads", e.to_string()))?;
    let trials: Vec<TrialReport> = pool.install(|| {
        (0..cfg.trials)
            .into_par_iter()
            .map(|t| run_trial(cfg, data, t).map(|r| r.report))
            .collect::<Result<Vec<_>>>()
    })?;
    RunReport::assemble(cfg.clone(), Vec::new(), trials, start.elapsed().as_secs_f64())
}

pub fn run_experiment(cfg: &ExperimentConfig, threads: usize) -> Result<RunReport> {
    cfg.validate()?;
    let data = load_datasets(cfg)?;
    run_experiment_with(cfg, &data, threads)
}

/// One report per grid point, in grid order; data is loaded once.
pub fn run_sweep(cfg: &ExperimentConfig, threads: usize) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    let data = load_datasets(cfg)?;
    cfg.grid()?
        .into_iter()
        .map(|point| {
            let at = cfg.at_point(&point)?;
            let mut report = run_experiment_with(&at, &data, threads)?;
            report.axes = axis_values(&point);
            Ok(report)
        })
        .collect()
}

fn axis_values(point: &GridPoint) -> Vec<AxisValue> {
    point
        .iter()
        .map(|(name, value)| AxisValue {
            name: name.clone(),
            value: *value,
        })
        .collect()
}

impl RunReport {
    pub(crate) fn assemble(
        config: ExperimentConfig,
        axes: Vec<AxisValue>,
        trials: Vec<TrialReport>,
        wall_clock_secs: f64,
    ) -> Result<Self> {
        let metrics: Vec<MetricsReport> = trials.iter().map(|t| t.metrics.clone()).collect();
        let aggregate = MetricsReport::mean(&metrics)?;
        let best_trial = match config.report {
            ReportMode::Mean => None,
            ReportMode::Best { select } => select.select(&metrics),
        };
        Ok(Self {
            config,
            axes,
            trials,
            aggregate,
            best_trial,
            wall_clock_secs,
        })
    }
}
