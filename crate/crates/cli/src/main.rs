use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rofg_core::harness::{
    inversions, parse_number, read_summaries, report, run_experiment, sweep, ExperimentConfig, SweepAxis,
};

#[derive(Parser)]
#[command(name = "rofg", about = "Desk-scale adversarial training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config file (key=value lines); defaults apply otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs/out")]
    out: PathBuf,
    /// Evaluation worker threads.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write curves, checkpoints and a summary.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Train once per value of one parameter (eps_a, t, p or eps_add).
    Sweep {
        param: String,
        /// Comma-separated values; fractions such as 8/255 are accepted.
        values: String,
        /// Divide every value by 255.
        #[arg(long)]
        per_255: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Aggregate the summaries of finished runs into one table.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { common } => {
            let cfg = load_config(&common)?;
            let summary = run_experiment(&cfg, &common.out, common.threads)?;
            print!("{}", summary.to_text());
        }
        Command::Sweep {
            param,
            values,
            per_255,
            common,
        } => {
            let axis = SweepAxis::parse(&param)?;
            let scale = if per_255 { 255.0 } else { 1.0 };
            let values: Vec<f64> = values
                .split(',')
                .map(|v| parse_number(v).map(|x| x / scale))
                .collect::<std::result::Result<_, _>>()?;
            if values.is_empty() {
                bail!("no sweep values");
            }
            let cfg = load_config(&common)?;
            let points = sweep(&cfg, axis, &values, Some(&common.out), common.threads)?;
            println!("{}\tbest_rob\tlast_rob\tgap", axis.name());
            for p in &points {
                println!(
                    "{:.6}\t{:.4}\t{:.4}\t{:.4}",
                    p.value, p.summary.best_rob_acc, p.summary.last_rob_acc, p.summary.gap
                );
            }
            let gaps: Vec<f64> = points.iter().map(|p| p.summary.gap).collect();
            let (n, worst) = inversions(&gaps);
            println!("gap increases along the sweep: {n} (largest {:.2} points)", 100.0 * worst);
        }
        Command::Report { dirs } => {
            let summaries = read_summaries(&dirs)?;
            print!("{}", report(&summaries));
        }
    }
    Ok(())
}
