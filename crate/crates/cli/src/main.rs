use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lossmix::config::ExperimentConfig;
use lossmix::data::{load_dataset, write_dataset};
use lossmix::sweep::{run_sweep, sweep_tasks, RunRecord};

mod analyze;
mod plot;

#[derive(Parser)]
#[command(name = "lossmix", version, about = "Loss weighting experiments on synthetic RGBD scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and validation scenes named by a config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (defaults to dataset.dir from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train every method x seed pair and write one curve file per run.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Curve directory (defaults to out from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset directory (defaults to dataset.dir from the config).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Runs trained at once.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Added to every configured seed.
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
    },
    /// Summarize a curve directory: convergence, errors, significance.
    Analyze {
        curves: PathBuf,
        /// Where summary.json and summary.txt go (defaults to the curve directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = lossmix::analysis::DEFAULT_METRIC)]
        metric: String,
        /// Compare every method against these only.
        #[arg(long = "baseline")]
        baselines: Vec<String>,
        #[arg(long, default_value_t = lossmix::analysis::DEFAULT_WINDOW_FACTOR)]
        window_factor: f64,
        #[arg(long, default_value_t = lossmix::analysis::DEFAULT_MIN_POINTS)]
        min_points: usize,
        #[arg(long, default_value_t = lossmix::analysis::DEFAULT_ALPHA)]
        alpha: f64,
    },
    /// Draw SVG figures from a curve directory.
    Plot {
        kind: PlotKind,
        curves: PathBuf,
        /// Output directory for the SVG files (defaults to the curve directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = lossmix::analysis::DEFAULT_METRIC)]
        metric: String,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PlotKind {
    Curves,
    Weights,
    Doublebox,
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn gen_data(config: &Path, out: Option<PathBuf>, force: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let dir = out.unwrap_or_else(|| cfg.dataset.dir.clone());
    let manifest = write_dataset(&cfg.dataset, &dir, force)?;
    println!(
        "wrote {} scenes ({} train, {} val) to {}",
        manifest.records.len(),
        manifest.n_train,
        manifest.n_val,
        dir.display()
    );
    Ok(())
}

fn sweep(config: &Path, out: Option<PathBuf>, data: Option<PathBuf>, jobs: usize, seed_offset: u64) -> Result<()> {
    let cfg = load_config(config)?;
    let tasks = sweep_tasks(&cfg, seed_offset)?;
    let data_dir = data.unwrap_or_else(|| cfg.dataset.dir.clone());
    let (manifest, dataset) = load_dataset(&data_dir)
        .with_context(|| format!("loading dataset from {} (run gen-data first)", data_dir.display()))?;
    if manifest.generator != cfg.dataset.generator || manifest.seed != cfg.dataset.seed {
        bail!("dataset in {} was generated with a different generator config or seed", data_dir.display());
    }
    let out = out.unwrap_or_else(|| cfg.out.clone());
    eprintln!("{} runs into {}", tasks.len(), out.display());
    let records = run_sweep(&cfg, &dataset, &out, jobs, seed_offset)?;
    for r in &records {
        match r {
            RunRecord::Skipped { run_id } => println!("{run_id}\tskipped"),
            RunRecord::Ran(s) => match &s.cause {
                Some(cause) => println!("{}\t{:?}: {cause}", s.run_id, s.outcome),
                None => println!("{}\t{:?}", s.run_id, s.outcome),
            },
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out, force } => gen_data(&config, out, force),
        Command::Sweep { config, out, data, jobs, seed_offset } => sweep(&config, out, data, jobs, seed_offset),
        Command::Analyze { curves, out, metric, baselines, window_factor, min_points, alpha } => {
            let opts = analyze::Options { metric, baselines, window_factor, min_points, alpha };
            analyze::run(&curves, out.as_deref().unwrap_or(&curves), &opts)
        }
        Command::Plot { kind, curves, out, metric } => plot::run(kind, &curves, out.as_deref().unwrap_or(&curves), &metric),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
