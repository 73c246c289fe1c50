use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use qsnn::config::{TrainConfig, PRESET_NAMES};
use qsnn::matrix::{reproduce_matrix, MatrixConfig};
use qsnn::train::{evaluate, load_data, network_from_checkpoint, run_training_on, write_artifacts};
use qsnn::Checkpoint;

#[derive(Parser)]
#[command(
    name = "qsnn",
    version,
    about = "Train and evaluate (quantized) spiking neural networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write run.csv, epochs.csv, model.ckpt and metadata.toml.
    Train {
        /// TOML file or `preset:<name>`.
        #[arg(long)]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value = "run-out")]
        out: PathBuf,
    },
    /// Run the precision × schedule × seed grid described by a matrix TOML file.
    Matrix {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the configured test set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: String,
    },
    /// Print a shipped preset as TOML (or list them without a name).
    Preset { name: Option<String> },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            epochs,
            out,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            cfg.validate()?;
            let data = load_data(&cfg)?;
            let outcome = run_training_on(&cfg, &data)?;
            write_artifacts(&outcome, &out).with_context(|| format!("writing {}", out.display()))?;
            let r = &outcome.record;
            println!(
                "test accuracy {:.2}% after {} epochs ({} iterations, {:.1}s); artifacts in {}",
                100.0 * r.test_accuracy,
                r.epochs.len(),
                r.iterations.len(),
                r.wall_clock_secs,
                out.display()
            );
        }
        Command::Matrix { config } => {
            let matrix = MatrixConfig::from_file(&config)?;
            let results = reproduce_matrix(&matrix)?;
            print!("{}", results.to_csv());
            let failed = results.runs.iter().filter(|r| r.result.is_err()).count();
            if failed > 0 {
                eprintln!("{failed} run(s) failed; see runs.csv in {}", matrix.out_dir.display());
            }
        }
        Command::Eval { checkpoint, config } => {
            let cfg = TrainConfig::load(&config)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mut net = network_from_checkpoint(&cfg, &ckpt)?;
            let data = load_data(&cfg)?;
            let ev = evaluate(&mut net, &data.test, cfg.time_steps, cfg.eval_batch_size)?;
            println!("test accuracy {:.2}%, loss {:.4}", 100.0 * ev.accuracy, ev.loss);
        }
        Command::Preset { name } => match name {
            Some(n) => print!("{}", TrainConfig::preset(&n)?.to_toml_string()?),
            None => PRESET_NAMES.iter().for_each(|n| println!("{n}")),
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
