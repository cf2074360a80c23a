mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{parse_config, Command, Overrides};
use failure::Failure;

/// Online variational filtering of latent dynamics from streaming observations.
#[derive(Parser)]
#[command(name = "vjf", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate latent trajectories and observations.
    Simulate(Common),
    /// Filter observations and learn the model online.
    Filter(Common),
    /// Forecast latent trajectories from the filtered state.
    Predict(Common),
    /// Evaluate the learned velocity field and its fixed points.
    Portrait(Common),
    /// Compare against a dual extended Kalman filter on a switching system.
    Eval(Common),
    /// Time the per-step update.
    Bench(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Built-in setup: ring, fhn, lorenz or lds.
    #[arg(long)]
    preset: Option<String>,
    /// Base seed; simulation, observation and training seeds derive from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Override a configuration key, as key.path=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Trajectory file (csv or bin) to use instead of simulating. Repeatable.
    #[arg(long = "input", short)]
    inputs: Vec<PathBuf>,
    /// Checkpoint to resume from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also write binary trajectories.
    #[arg(long)]
    binary: bool,
    /// Record wall-clock times in diagnostics.
    #[arg(long)]
    timing: bool,
}

fn execute(command: Command, args: Common) -> Result<String, Failure> {
    let document = match &args.config {
        Some(path) => Some(std::fs::read_to_string(path).map_err(|e| Failure::Config {
            key: None,
            message: format!("cannot read {}: {e}", path.display()),
        })?),
        None => None,
    };
    let overrides = Overrides {
        preset: args.preset,
        seed: args.seed,
        out: args.out,
        set: args.set,
        inputs: args.inputs,
        checkpoint: args.checkpoint,
        binary: args.binary,
        timing: args.timing,
    };
    let config = parse_config(command, document.as_deref(), &overrides)?;
    commands::run(&config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::Simulate(a) => (Command::Simulate, a),
        Cmd::Filter(a) => (Command::Filter, a),
        Cmd::Predict(a) => (Command::Predict, a),
        Cmd::Portrait(a) => (Command::Portrait, a),
        Cmd::Eval(a) => (Command::Eval, a),
        Cmd::Bench(a) => (Command::Bench, a),
    };
    match execute(command, args) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", f.to_json());
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
