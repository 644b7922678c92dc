use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ubimap::commands::{run, Command, Options};

#[derive(Parser)]
#[command(name = "ubimap", version, about = "Fixed-camera mapping testbed")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Choose camera placements
    Plan(Args),
    /// Calibrate cameras from shared landmarks
    Calibrate(Args),
    /// Run the full mapping loop
    Simulate(Args),
    /// Render the cameras' first-frame map and the ground truth
    Render(Args),
}

#[derive(clap::Args)]
struct Args {
    scenario: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Use exhaustive search instead of greedy placement
    #[arg(long)]
    exact: bool,
    /// Fail with exit code 2 on constraint violations
    #[arg(long)]
    strict: bool,
    /// Simulated seconds
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { 1 } else { 0 };
            return ExitCode::from(code);
        }
    };
    let (cmd, args) = match cli.command {
        Cmd::Plan(a) => (Command::Plan, a),
        Cmd::Calibrate(a) => (Command::Calibrate, a),
        Cmd::Simulate(a) => (Command::Simulate, a),
        Cmd::Render(a) => (Command::Render, a),
    };
    let opts = Options {
        seed: args.seed,
        exact: args.exact,
        strict: args.strict,
        duration: args.duration,
        out: args.out,
    };
    ExitCode::from(run(cmd, &args.scenario, &opts))
}
