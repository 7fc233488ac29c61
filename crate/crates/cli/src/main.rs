//! `sparsevar` command-line front end.
//!
//! Exit codes: 0 on success, 1 when a pipeline run or an oracle property
//! fails, 2 when the configuration or the arguments are invalid.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "sparsevar",
    version,
    about = "Token exclusion for a toy next-scale prediction pipeline"
)]
struct Cli {
    /// Print machine-readable JSON on standard output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the dense and/or sparse pipeline and write images, masks and reports.
    Run { config: PathBuf },
    /// Run the sparse pipeline once per value of one parameter.
    Sweep {
        config: PathBuf,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values; each parameter has a default list.
        #[arg(long)]
        values: Option<String>,
        /// Number of runs executed concurrently.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
        jobs: u16,
    },
    /// Compare the exclusion metrics over their threshold sweeps.
    CompareMetrics { config: PathBuf },
    /// Run the invariant battery.
    Oracle { config: PathBuf },
    /// Dump per-stage decode-difference maps and per-block MSE change maps of the dense run.
    DumpObs { config: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Tau,
    Alpha,
    #[value(name = "P")]
    StartStage,
    Block,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config } => commands::run(&config, cli.json),
        Command::Sweep {
            config,
            param,
            values,
            jobs,
        } => commands::sweep(&config, param, values.as_deref(), jobs as usize, cli.json),
        Command::CompareMetrics { config } => commands::compare(&config, cli.json),
        Command::Oracle { config } => commands::oracle(&config, cli.json),
        Command::DumpObs { config } => commands::dump_obs(&config, cli.json),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("sparsevar: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
