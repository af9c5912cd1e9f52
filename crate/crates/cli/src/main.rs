use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lltts_core::harness::{self, parse_config, ExperimentConfig, TrainOptions};

/// Lifelong multilingual TTS replay experiments on synthetic languages.
#[derive(Debug, Parser)]
#[command(name = "lltts", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the configured datasets into <output_dir>/data.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the configured strategy over the task sequence.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the latest stage checkpoint.
        #[arg(long)]
        resume: bool,
        /// Resume from a checkpoint written for a different config.
        #[arg(long, requires = "resume")]
        allow_config_mismatch: bool,
        /// Stop after this many stages.
        #[arg(long, value_name = "N")]
        stop_after_stage: Option<usize>,
    },
    /// Render the stage table across every run under a directory.
    Report {
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
        #[arg(long, value_name = "CSV")]
        out: PathBuf,
    },
}

fn load(path: &PathBuf) -> lltts_core::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

fn run(cli: Cli) -> lltts_core::Result<()> {
    match cli.command {
        Command::GenData { config } => {
            for path in harness::gen_data(&load(&config)?)? {
                println!("{}", path.display());
            }
        }
        Command::Train {
            config,
            resume,
            allow_config_mismatch,
            stop_after_stage,
        } => {
            let config = load(&config)?;
            let opts = TrainOptions {
                resume,
                allow_config_mismatch,
                stop_after: stop_after_stage,
            };
            match harness::train(&config, &opts)? {
                Some(result) => {
                    let last = result.final_stage().map(|r| r.average).unwrap_or(f64::NAN);
                    println!("{}: final average MCD {last:.4}", result.strategy.name());
                }
                None => println!("stopped after stage {}", stop_after_stage.unwrap_or(0)),
            }
        }
        Command::Report { input, out } => {
            harness::report(&input, &out)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let env = env_logger::Env::new().filter_or("LLTTS_LOG", "warn");
    env_logger::Builder::from_env(env).format_timestamp(None).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lltts: {e}");
            ExitCode::FAILURE
        }
    }
}
