//! `dlnm-lps`: fit, compare, simulate, score and report.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure, 1 output i/o error.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod data;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::{run_compare, run_fit, run_score, run_simulate, Context};
use crate::config::LoadedConfig;
use crate::error::CliResult;

#[derive(Parser)]
#[command(name = "dlnm-lps", version, about = "Spatio-temporal DLNMs with effect modification, fitted by Laplacian P-splines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one model and write fit.json, xi.csv and rr_grid.csv.
    Fit(RunArgs),
    /// Generate replicates, fit the listed variants and write scores.
    Simulate(RunArgs),
    /// Score estimator grids against truth grids.
    Score(RunArgs),
    /// Fit several models on one panel and tabulate ΔDIC.
    Compare(RunArgs),
    /// Fit one model and write every inference table (RR, RRR, exceedance, AF).
    Report(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> CliResult<()> {
    let (cmd, args) = match cli.command {
        Command::Fit(a) => ("fit", a),
        Command::Simulate(a) => ("simulate", a),
        Command::Score(a) => ("score", a),
        Command::Compare(a) => ("compare", a),
        Command::Report(a) => ("report", a),
    };
    let loaded = LoadedConfig::load(&args.config)?;
    let ctx = Context::new(loaded, args.seed, args.threads, args.out)?;
    match cmd {
        "fit" => run_fit(&ctx, false),
        "report" => run_fit(&ctx, true),
        "simulate" => run_simulate(&ctx),
        "score" => run_score(&ctx),
        _ => run_compare(&ctx),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
