use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ephemeral_alloc::config::ExperimentConfig;
use ephemeral_alloc::harness::{
    compare_to_dir, eval_to_dir, train_to_dir, PolicyEvaluation, COMPARISON_FILE,
    LEARNING_CURVE_FILE,
};
use ephemeral_alloc::traces::{generate_synthetic, write_traces, GeneratorProfile};

#[derive(Parser)]
#[command(name = "ephsim", version, about = "Ephemeral/stable capacity allocation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic utilization trace as CSV.
    GenTraces {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        days: usize,
        /// Probability that a step's prediction underestimates actual use.
        #[arg(long)]
        p_true: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the agent and write its checkpoint and learning curve.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the configured policies on the held-out days.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Agent against both baselines on the held-out days.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn print_summaries(evaluations: &[PolicyEvaluation]) {
    println!(
        "{:<10} {:>5} {:>12} {:>14} {:>16} {:>10}",
        "policy", "days", "profit/day", "violation min", "ephem unit-h", "stable %"
    );
    for e in evaluations {
        let s = &e.summary;
        println!(
            "{:<10} {:>5} {:>12.4} {:>14.2} {:>16.2} {:>10.2}",
            e.policy.name(),
            s.days,
            s.profit.mean,
            s.violation_min.mean,
            s.ephem_unit_hours.mean,
            100.0 * s.stable_pct.mean
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenTraces {
            seed,
            days,
            p_true,
            out,
        } => {
            if !(0.0..=1.0).contains(&p_true) {
                bail!("--p-true must lie in [0, 1], got {p_true}");
            }
            let profile = GeneratorProfile {
                p_true,
                ..GeneratorProfile::default()
            };
            let windows = generate_synthetic(seed, days, &profile)?;
            write_traces(&out, &windows)?;
            println!(
                "wrote {} days ({} samples) to {}",
                windows.len(),
                windows.iter().map(|w| w.len()).sum::<usize>(),
                out.display()
            );
        }
        Command::Train { config, out } => {
            let cfg = load_config(&config)?;
            let (outcome, ckpt) = train_to_dir(&cfg, &out)?;
            if let Some(last) = outcome.curve.last() {
                println!(
                    "trained {} episodes on {} windows; last episode profit {:.4}, violation min {:.1}, epsilon {:.4}",
                    outcome.curve.len(),
                    outcome.split.train.len(),
                    last.profit,
                    last.violation_min,
                    outcome.agent.epsilon()
                );
            }
            println!("checkpoint: {}", ckpt.display());
            println!("learning curve: {}", out.join(LEARNING_CURVE_FILE).display());
        }
        Command::Eval {
            config,
            checkpoint,
            out,
        } => {
            let cfg = load_config(&config)?;
            let evaluations = eval_to_dir(&cfg, checkpoint.as_deref(), &out)?;
            print_summaries(&evaluations);
            println!("reports: {}", out.display());
        }
        Command::Compare {
            config,
            checkpoint,
            out,
        } => {
            let cfg = load_config(&config)?;
            let comparison = compare_to_dir(&cfg, &checkpoint, &out)?;
            print_summaries(&comparison.evaluations);
            println!("comparison: {}", out.join(COMPARISON_FILE).display());
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
