//! `ctxp`: dataset generation, training, evaluation, benchmarking and
//! ablation sweeps for the multi-frame policy.
//!
//! Exit codes: 0 success, 2 invalid arguments or configuration, 3 runtime
//! failure.

mod ablate;
mod commands;
mod manifest;
mod settings;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Invalid user input; maps to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Usage(pub String);

#[derive(Parser, Debug)]
#[command(name = "ctxp", version, about = "Multi-frame policy toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Record scripted demonstrations.
    GenData(commands::GenDataArgs),
    /// Behaviour cloning on a dataset.
    Train(commands::TrainArgs),
    /// Closed-loop success rates of a checkpoint or the expert.
    Eval(commands::EvalArgs),
    /// Per-act latency and attention cost of the three inference modes.
    Bench(commands::BenchArgs),
    /// Train and evaluate one model per setting of an axis.
    Ablate(ablate::AblateArgs),
}

/// Prints rows as left-aligned columns.
pub fn print_table(headers: &[&str], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        println!("{}", padded.join("  ").trim_end());
    };
    line(headers.to_vec());
    for r in rows {
        line(r.iter().map(String::as_str).collect());
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use ctxp_core::Error as E;
    for cause in e.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(ce) = cause.downcast_ref::<E>() {
            return match ce {
                E::Config(_) | E::Invalid(_) | E::Shape(_) => 2,
                _ => 3,
            };
        }
    }
    3
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("CTXP_THREADS") {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| Usage(format!("CTXP_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    init_threads()?;
    match &cli.cmd {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench_cmd(a),
        Command::Ablate(a) => ablate::ablate(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
