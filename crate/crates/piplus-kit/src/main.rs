mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Failure;
use config::{Algo, ModelConfig, Overrides, Scenario, Select};

/// Policy iteration experiments: run PI or PI⁺, emit bound tables, verify
/// the stability and near-optimality certificates, or replay the
/// counterexample.
#[derive(Parser, Debug)]
#[command(name = "piplus-kit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an algorithm and write traces, bound tables and a summary.
    Run(Args),
    /// Objective curve, tie values, gap evidence and a PI⁺ transcript.
    DemoCounterexample(DemoArgs),
    /// β and α̃∘β on an (s, k) lattice plus the stopping iteration.
    Bounds(Args),
    /// Run an algorithm and every certificate check against the oracle.
    Verify(Args),
}

#[derive(clap::Args, Debug)]
struct Args {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(clap::Args, Debug)]
struct DemoArgs {
    /// Defaults to the built-in counterexample at 2001 nodes.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(clap::Args, Debug)]
struct Common {
    #[arg(long, value_enum)]
    algo: Option<Algo>,
    /// Number of improvement steps.
    #[arg(long)]
    iters: Option<usize>,
    /// Selection rule for PI when the improvement set has ties.
    #[arg(long, value_enum)]
    select: Option<Select>,
    /// Seed for `--select random`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl From<&Common> for Overrides {
    fn from(c: &Common) -> Self {
        Overrides {
            algo: c.algo,
            iters: c.iters,
            select: c.select,
            seed: c.seed,
            out: c.out.clone(),
        }
    }
}

fn threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("PIPLUS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Config(format!("PIPLUS_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Config(e.to_string()))
}

fn load(path: &std::path::Path, common: &Common) -> Result<Scenario, Failure> {
    let mut sc = Scenario::load(path).map_err(Failure::Config)?;
    sc.apply(&common.into());
    Ok(sc)
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    threads()?;
    match &cli.command {
        Command::Run(a) => commands::cmd_run(&load(&a.scenario, &a.common)?),
        Command::Bounds(a) => commands::cmd_bounds(&load(&a.scenario, &a.common)?),
        Command::Verify(a) => commands::cmd_verify(&load(&a.scenario, &a.common)?),
        Command::DemoCounterexample(a) => {
            let mut sc = match &a.scenario {
                Some(p) => load(p, &a.common)?,
                None => {
                    let mut sc = Scenario::parse("[model]\nkind = \"counterexample\"\n[algo]\niters = 5\n")
                        .expect("built-in scenario parses");
                    sc.apply(&(&a.common).into());
                    sc
                }
            };
            if sc.model != (ModelConfig::Counterexample {}) {
                return Err(Failure::Config(
                    "demo-counterexample needs the counterexample model".into(),
                ));
            }
            sc.algo.name = Algo::Piplus;
            commands::cmd_demo(&sc)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("piplus-kit: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
