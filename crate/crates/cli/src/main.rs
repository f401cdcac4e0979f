//! `tastetrace run <stage|all> --config PATH`

mod artifact;
mod config;
mod exit;
mod panels;
mod plot;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::PipelineConfig;
use crate::exit::Failure;
use crate::stages::{run_stages, Outcome, Stage};

#[derive(Parser)]
#[command(name = "tastetrace", version, about = "Listening-log taste measurement pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one stage, or `all` stages in order.
    Run {
        /// synth, ingest, train, vectors, metrics, regress, did, report or all
        stage: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let Command::Run {
        stage,
        config,
        seed,
        workers,
    } = cli.command;
    let config = PipelineConfig::load(&config)?.finish(seed, workers)?;
    let stages = if stage == "all" {
        Stage::pipeline(&config)
    } else {
        vec![stage.parse::<Stage>().map_err(Failure::Config)?]
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build_global()
        .map_err(anyhow::Error::from)?;
    for (s, outcome) in run_stages(&config, &stages)? {
        let status = match outcome {
            Outcome::Ran => "done",
            Outcome::UpToDate => "up to date",
        };
        println!("{s}: {status}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
