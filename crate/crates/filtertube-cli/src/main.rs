//! Experiment runner for the filtertube library.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use filtertube_cli::commands::{self, cmd_async, cmd_closedloop, cmd_roa, RunOptions};
use filtertube_cli::config::ExperimentConfig;
use filtertube_cli::selftest;

#[derive(Parser)]
#[command(name = "filtertube", version, about = "Robust tube MPC experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Base seed; run `r` uses `seed + r`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ignore cached invariant sets.
    #[arg(long)]
    recompute_invariants: bool,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Region-of-attraction grids and sweeps.
    Roa(CommonArgs),
    /// Monte-Carlo closed loops of one controller.
    Closedloop(CommonArgs),
    /// Asynchronous scheme, optionally against the receding-horizon controller.
    Async(CommonArgs),
    /// Runs the built-in property suites.
    Selftest,
}

const EXIT_AUDIT: u8 = 2;
const EXIT_CONFIG: u8 = 3;

fn run_experiment(args: &CommonArgs, f: fn(&ExperimentConfig, &str, &RunOptions) -> anyhow::Result<commands::Outcome>) -> ExitCode {
    let (cfg, text) = match ExperimentConfig::load(&args.config) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let opts = RunOptions {
        seed: args.seed,
        out: args.out.clone(),
        recompute_invariants: args.recompute_invariants,
        jobs: args.jobs.max(1),
    };
    match f(&cfg, &text, &opts) {
        Ok(o) => {
            print!("{}", o.report);
            if o.audit_failures > 0 {
                eprintln!("audit failed: {} findings", o.audit_failures);
                ExitCode::from(EXIT_AUDIT)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Roa(a) => run_experiment(a, cmd_roa),
        Command::Closedloop(a) => run_experiment(a, cmd_closedloop),
        Command::Async(a) => run_experiment(a, cmd_async),
        Command::Selftest => {
            let results = selftest::run_all();
            let mut ok = true;
            for r in &results {
                println!("{} {} ({:.1} s): {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.seconds, r.detail);
                ok &= r.passed;
            }
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_AUDIT)
            }
        }
    }
}
