//! `sepfit` command-line front end. Every subcommand reads one TOML config.
//!
//! Exit status: 0 converged (or finished), 2 fit did not converge, 1 input
//! or output error, 3 rank failure under `rank_policy = "strict"`.

mod commands;
mod config;
mod data;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sepfit::optimizer::Mode;

use commands::Overrides;

#[derive(Parser)]
#[command(name = "sepfit", version, about = "Separable least-squares fitting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; 0 means all cores. Default: 1 for fits, all cores for bench and basin.
    #[arg(long, global = true, env = "SEPFIT_THREADS")]
    threads: Option<usize>,
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `fit.mode`.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Shortcut,
    Classical,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Fit one dataset.
    Fit,
    /// Fit several files sharing the nonlinear parameters.
    FitMulti,
    /// χ² along one nonlinear coordinate.
    Slice,
    /// Convergence map over a grid of starting points.
    Basin,
    /// Scaling or multi-file benchmark.
    Bench,
    /// Write synthetic data.
    Simulate,
}

fn run(cli: &Cli) -> Result<bool, error::CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| error::CliError::Input("--config is required".into()))?;
    let threads = match (cli.threads, cli.command) {
        (Some(n), _) => n,
        (None, Command::Bench | Command::Basin) => 0,
        (None, _) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| error::CliError::Input(format!("cannot start {threads} threads: {e}")))?;
    let overrides = Overrides {
        seed: cli.seed,
        mode: cli.mode.map(|m| match m {
            ModeArg::Shortcut => Mode::Shortcut,
            ModeArg::Classical => Mode::Classical,
        }),
    };
    let cfg = commands::prepare(path, &overrides)?;
    match cli.command {
        Command::Fit => commands::fit_cmd(&cfg),
        Command::FitMulti => commands::fit_multi_cmd(&cfg),
        Command::Slice => commands::slice_cmd(&cfg),
        Command::Basin => commands::basin_cmd(&cfg),
        Command::Bench => commands::bench_cmd(&cfg),
        Command::Simulate => commands::simulate_cmd(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("warning: fit did not converge");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
