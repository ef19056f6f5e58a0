use std::path::PathBuf;
use std::process::ExitCode;

use bsde_harness::{run, Command, ExperimentConfig, RunOptions};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bsde", version, about = "Convergence experiments for BSDE discretization schemes")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Sweep the grid step-size bound over (beta, theta, N).
    VerifyGrid(Args),
    /// Dump simulated forward paths for every N.
    Simulate(Args),
    /// Solve the scheme for every N and write the solutions.
    Solve(Args),
    /// Solve, score against the reference and fit the rate.
    Convergence(Args),
    /// Monte Carlo estimate of Z_0 from discrete weights.
    ProbeRepresentation(Args),
    /// Fit the fractional smoothness exponent of the terminal condition.
    Smoothness(Args),
    /// Merge convergence summaries into one table.
    Report(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `experiment.output` or `out/<name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `experiment.seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "BSDE_THREADS")]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Sub::VerifyGrid(a) => (Command::VerifyGrid, a),
        Sub::Simulate(a) => (Command::Simulate, a),
        Sub::Solve(a) => (Command::Solve, a),
        Sub::Convergence(a) => (Command::Convergence, a),
        Sub::ProbeRepresentation(a) => (Command::ProbeRepresentation, a),
        Sub::Smoothness(a) => (Command::Smoothness, a),
        Sub::Report(a) => (Command::Report, a),
    };
    let cfg = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let options = RunOptions {
        out: args.out,
        seed: args.seed,
        threads: args.threads,
    };
    match run(command, &cfg, &options) {
        Ok(o) => {
            for n in &o.notes {
                println!("{n}");
            }
            println!("{} -> {}: {}", command.name(), o.output.display(), if o.passed { "PASS" } else { "FAIL" });
            if o.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
