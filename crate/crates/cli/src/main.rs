use std::fs::{self, File};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use noisylab::data::{self, make_blobs};
use noisylab::harness::{self, compare_strategies, noise_check, preset_names, run_experiment, CampaignReport, RunOptions};
use noisylab::metrics::{aggregate_trials, RunMetrics};
use noisylab::Strategy;

#[derive(Parser)]
#[command(name = "noisylab", version, about = "Training with noisy labels: Co-teaching baselines and mutual label correction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every strategy and trial of a config.
    Run {
        config: PathBuf,
        /// Maximum number of trials trained at once.
        #[arg(long, env = "NOISYLAB_JOBS", default_value_t = 1)]
        jobs: usize,
        /// Overrides the config's output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run one campaign per strategy on shared noisy labels and write a
    /// best/last table.
    Compare {
        config: PathBuf,
        /// Comma-separated strategy names.
        #[arg(long, value_delimiter = ',', required = true)]
        strategies: Vec<Strategy>,
        #[arg(long, env = "NOISYLAB_JOBS", default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Summarize one or more metrics.csv files.
    Inspect {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
    /// Write a Gaussian-blob train/test pair as IDX files.
    GenBlobs {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        per_class: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 0.4)]
        spread: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.75)]
        train_fraction: f64,
    },
    /// Corrupt labels as a config would and report noise statistics without
    /// training.
    NoiseCheck { config: PathBuf },
    /// List the shipped presets.
    Presets,
}

fn load_spec(config: &PathBuf, output: Option<PathBuf>) -> Result<harness::ExperimentSpec> {
    let mut spec = harness::parse_config(config).with_context(|| format!("config {}", config.display()))?;
    if let Some(out) = output {
        spec.output_dir = out;
    }
    Ok(spec)
}

fn print_report(report: &CampaignReport) {
    println!("{:<24} {:>6} {:>10} {:>10}", "strategy", "trials", "mean_best", "mean_last");
    for a in &report.aggregates {
        println!(
            "{:<24} {:>6} {:>10.4} {:>10.4}",
            a.strategy.name(),
            a.completed,
            a.mean_best,
            a.mean_last
        );
    }
    for f in &report.failures {
        eprintln!(
            "FAILED {} seeds [{}, {}, {}]: {}",
            f.strategy, f.seeds.net1, f.seeds.net2, f.seeds.shuffle, f.error
        );
    }
    println!("outputs in {}", report.output_dir.display());
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { config, jobs, output } => {
            let spec = load_spec(&config, output)?;
            let report = run_experiment(&spec, RunOptions { jobs })?;
            print_report(&report);
            Ok(report.succeeded())
        }
        Command::Compare {
            config,
            strategies,
            jobs,
            output,
        } => {
            let spec = load_spec(&config, output)?;
            let cmp = compare_strategies(&spec, &strategies, RunOptions { jobs })?;
            print_report(&cmp.report);
            Ok(cmp.report.succeeded())
        }
        Command::Inspect { metrics } => {
            let mut runs = Vec::new();
            for path in &metrics {
                let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
                let run = RunMetrics::read_csv(f).with_context(|| format!("parsing {}", path.display()))?;
                let Some(s) = run.summary() else {
                    bail!("{} has no epochs", path.display());
                };
                println!(
                    "{}: epochs {} best {:.4} (epoch {}) last10 {:.4}",
                    path.display(),
                    run.records.len(),
                    s.best_acc,
                    s.argbest_epoch,
                    s.last10_mean_acc
                );
                runs.push(run);
            }
            if runs.len() > 1 {
                let b = aggregate_trials(&runs)?;
                println!(
                    "pooled last10 over {} runs: min {:.4} q1 {:.4} median {:.4} q3 {:.4} max {:.4} mean {:.4}",
                    runs.len(),
                    b.min,
                    b.q1,
                    b.median,
                    b.q3,
                    b.max,
                    b.mean
                );
            }
            Ok(true)
        }
        Command::GenBlobs {
            out,
            per_class,
            classes,
            dim,
            spread,
            seed,
            train_fraction,
        } => {
            let all = make_blobs(per_class, classes, dim, spread, seed)?;
            let (train, test) = data::split(&all, train_fraction, seed)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            data::write_idx(&train, out.join("train-images.idx"), out.join("train-labels.idx"))?;
            data::write_idx(&test, out.join("test-images.idx"), out.join("test-labels.idx"))?;
            println!(
                "wrote {} train and {} test examples to {}",
                train.len(),
                test.len(),
                out.display()
            );
            Ok(true)
        }
        Command::NoiseCheck { config } => {
            let spec = load_spec(&config, None)?;
            let mut ok = true;
            for c in noise_check(&spec)? {
                let within = (c.realized_rate - c.target_ratio).abs() <= c.three_sigma;
                ok &= within;
                println!(
                    "trial {} seed {}: n {} target {:.4} realized {:.4} (3 sigma {:.4}, {}) chi2 {:.2} dof {} p {:.4}",
                    c.trial,
                    c.noise_seed,
                    c.examples,
                    c.target_ratio,
                    c.realized_rate,
                    c.three_sigma,
                    if within { "within" } else { "outside" },
                    c.fit.statistic,
                    c.fit.dof,
                    c.fit.p_value
                );
            }
            Ok(ok)
        }
        Command::Presets => {
            for name in preset_names() {
                println!("{name}");
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
