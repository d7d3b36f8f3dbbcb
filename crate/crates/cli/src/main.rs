//! `petl-lab`: run ablation experiments, count parameters, check gradients
//! and export trade-off scatter data.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use petl_lab::experiment::{
    emit_counts, grad_check_config, plot_tradeoff, resolve_out_dir, run_experiment, ExperimentConfig, RunOptions,
};

/// Environment variable naming the default output directory.
const OUT_ENV: &str = "PETL_LAB_OUT";

#[derive(Parser, Debug)]
#[command(name = "petl-lab", version, about = "Parameter-efficient video transformer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides PETL_LAB_OUT and the config
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed; run i uses seed + i
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress progress output
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every point of the ablation cross product
    Run {
        #[command(flatten)]
        common: Common,
        /// Run independent points on separate threads
        #[arg(long)]
        parallel: bool,
    },
    /// Write parameter count reports without training
    Count {
        #[command(flatten)]
        common: Common,
    },
    /// Central-difference gradient check of the first ablation point
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Number of training clips in the checked batch
        #[arg(long, default_value_t = 2)]
        samples: usize,
        /// Fail when the max relative error reaches this value
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Turn a report.csv into trade-off scatter data
    Plot {
        /// Report produced by `run`
        #[arg(long)]
        report: PathBuf,
        /// Destination CSV; defaults to tradeoff.csv next to the report
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
}

fn out_dir(flag: Option<&Path>, config: &ExperimentConfig) -> PathBuf {
    let env = std::env::var(OUT_ENV).ok();
    resolve_out_dir(flag, env.as_deref(), config.output.dir.as_deref())
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { common, parallel } => {
            let config = load(&common)?;
            let opts = RunOptions {
                out: out_dir(common.out.as_deref(), &config),
                seed: common.seed,
                quiet: common.quiet,
                parallel,
            };
            let outcome = run_experiment(&common.config, &opts)?;
            if !common.quiet {
                println!("{} run(s) written to {}", outcome.rows.len(), outcome.out.display());
            }
        }
        Command::Count { common } => {
            let config = load(&common)?;
            let out = out_dir(common.out.as_deref(), &config);
            let report = emit_counts(&common.config, &out)?;
            if !common.quiet {
                for r in &report.rows {
                    let published = r.published.as_deref().unwrap_or("-");
                    println!(
                        "{} {} d_bottle={} sites={} trainable={} ({}) published={published}",
                        r.config_id, r.mechanism, r.d_bottle, r.sites, r.trainable_count, r.trainable_millions
                    );
                }
                println!("counts written to {}", out.display());
            }
        }
        Command::Gradcheck { common, eps, samples, tol } => {
            let config = load(&common)?;
            let report = grad_check_config(&config, eps, samples)?;
            if let Some(dir) = common.out.as_deref() {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                let path = dir.join("gradcheck.json");
                std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            if !common.quiet {
                println!(
                    "checked {} entries: max relative error {:.3e} at {}[{}]",
                    report.checked, report.max_rel_err, report.worst_path, report.worst_index
                );
            }
            if report.max_rel_err >= tol {
                bail!("gradient check failed: max relative error {:.3e} >= {tol:e}", report.max_rel_err);
            }
        }
        Command::Plot { report, out, quiet } => {
            let out = out.unwrap_or_else(|| report.with_file_name("tradeoff.csv"));
            let points = plot_tradeoff(&report, &out)?;
            if !quiet {
                println!("{} point(s) written to {}", points.len(), out.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
