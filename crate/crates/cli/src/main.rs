use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dropattack_core::harness::{
    self, suite, ExperimentConfig, ReportFormat, ReportSet, RunReport,
};

#[derive(Parser, Debug)]
#[command(name = "dropattack", version, about = "Train MNIST/blob classifiers under honest or adversarial dropout")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Override the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config's trial count.
    #[arg(long, global = true)]
    trials: Option<usize>,

    /// Report path (default: reports/<name>.<format>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,

    /// Worker threads for trial-level parallelism (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and evaluate a sweep-free config.
    Run { config: PathBuf },
    /// Run every point of a config's sweep grid.
    Sweep { config: PathBuf },
    /// Re-execute a JSON report from its config echo and verify every number.
    Replay { report: PathBuf },
    /// Run the acceptance scenarios and print one pass/fail line per criterion.
    PaperSuite {
        /// Directory with the MNIST IDX files (default: $MNIST_DIR, then data/mnist).
        #[arg(long)]
        mnist_dir: Option<PathBuf>,
        /// Criterion numbers to run, comma separated (default: all).
        #[arg(long, value_delimiter = ',')]
        only: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        }
    }
}

fn load_config(path: &Path, cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = cli.trials {
        cfg.trials = trials;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_path(cli: &Cli, name: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| {
        let ext = match cli.format {
            Format::Csv => "csv",
            Format::Json => "json",
        };
        PathBuf::from("reports").join(format!("{name}.{ext}"))
    })
}

fn fmt_pct(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{:.2}%", 100.0 * v)
    }
}

fn print_runs(runs: &[RunReport]) {
    for run in runs {
        let axes: Vec<String> = run.axes.iter().map(|a| format!("{}={}", a.name, a.value)).collect();
        let m = run.headline();
        let label = if run.best_trial.is_some() { "best" } else { "mean" };
        println!(
            "{}{}: {label} accuracy {} | class 0 precision {} recall {} | {} trial(s), {:.1}s",
            run.config.name,
            if axes.is_empty() { String::new() } else { format!(" [{}]", axes.join(", ")) },
            fmt_pct(m.accuracy),
            fmt_pct(m.precision.first().copied().unwrap_or(f64::NAN)),
            fmt_pct(m.recall.first().copied().unwrap_or(f64::NAN)),
            run.trials.len(),
            run.wall_clock_secs,
        );
    }
}

fn write_set(cli: &Cli, name: &str, runs: Vec<RunReport>) -> Result<()> {
    let path = out_path(cli, name);
    ReportSet { runs }
        .write(&path, cli.format.into())
        .with_context(|| format!("writing report {}", path.display()))?;
    println!("report written to {}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Run { config } => {
            let cfg = load_config(config, cli)?;
            if cfg.sweep.is_some() {
                bail!("{} has sweep axes; use `dropattack sweep`", config.display());
            }
            let report = harness::run_experiment(&cfg, cli.threads)?;
            print_runs(std::slice::from_ref(&report));
            write_set(cli, &cfg.name, vec![report])?;
            Ok(true)
        }
        Command::Sweep { config } => {
            let cfg = load_config(config, cli)?;
            if cfg.sweep.is_none() {
                bail!("{} has no [sweep] section", config.display());
            }
            let runs = harness::run_sweep(&cfg, cli.threads)?;
            print_runs(&runs);
            write_set(cli, &cfg.name, runs)?;
            Ok(true)
        }
        Command::Replay { report } => {
            let set = ReportSet::load(report)?;
            let fresh = harness::replay(&set, cli.threads)?;
            print_runs(&fresh);
            println!("replay matches: {} run(s) reproduced bit-identically", fresh.len());
            Ok(true)
        }
        Command::PaperSuite { mnist_dir, only } => {
            let mut opts = suite::SuiteOptions::from_env();
            if let Some(dir) = mnist_dir {
                opts.mnist_dir = dir.clone();
            }
            if let Some(seed) = cli.seed {
                opts.seed = seed;
            }
            if let Some(trials) = cli.trials {
                opts.trials_override = Some(trials);
            }
            opts.threads = cli.threads;
            opts.only = only.clone();
            let results = suite::run_suite(&opts, |r| println!("{}", r.line()));
            let passed = results.iter().filter(|r| r.passed).count();
            println!("{passed}/{} criteria passed", results.len());
            if let Some(path) = &cli.out {
                suite::write_results(&results, path, cli.format.into())?;
                println!("results written to {}", path.display());
            }
            Ok(passed == results.len())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
