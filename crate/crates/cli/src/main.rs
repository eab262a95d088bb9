mod commands;
mod output;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{GenDataArgs, McBaselineArgs, PredictArgs, TrainArgs, UqArgs};

/// Deep GP surrogates for random-permeability Darcy flow.
#[derive(Debug, Parser)]
#[command(name = "dgp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample permeability fields and solve the flow problem for each.
    GenData(GenDataArgs),
    /// Fit a deep GP to one output field of a dataset.
    Train(TrainArgs),
    /// Predictive mean and variance for new inputs.
    Predict(PredictArgs),
    /// Propagate the input distribution through a trained model.
    Uq(UqArgs),
    /// Plain Monte Carlo over the simulator.
    McBaseline(McBaselineArgs),
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("DGP_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| format!("DGP_THREADS must be a positive integer, got {v:?}"))?;
    if n == 0 {
        return Err("DGP_THREADS must be a positive integer, got 0".into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| format!("cannot size the thread pool: {e}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let res = match &cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Uq(a) => commands::uq(a),
        Command::McBaseline(a) => commands::mc_baseline(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
