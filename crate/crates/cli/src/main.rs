mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spin_impute::model::ModelConfig;

use config::RunConfig;

/// Sparse spatiotemporal attention imputation for sensor networks.
#[derive(Parser)]
#[command(name = "spin", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic sensor network and a starter run config.
    Synth {
        /// Generator settings (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply the configured missing-data policy and write the masks.
    Inject {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a model; writes checkpoint.json and history.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fill the hidden cells of the values file.
    Impute {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to <output.dir>/checkpoint.json.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to <output.dir>/imputed.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score the model and the mean/knn baselines on the test split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Count query-key pairs and time forward passes over window lengths.
    Benchmark {
        /// Run config whose model section is benchmarked; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        nodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let load = |p: &Path| RunConfig::load(p);
    match cli.command {
        Command::Synth { config, out } => commands::synth(config.as_deref(), &out),
        Command::Inject { config } => commands::inject(&load(&config)?),
        Command::Train { config } => commands::train_cmd(&load(&config)?),
        Command::Impute { config, checkpoint, out } => commands::impute(&load(&config)?, checkpoint, out),
        Command::Evaluate { config, checkpoint } => commands::evaluate_cmd(&load(&config)?, checkpoint),
        Command::Benchmark {
            config,
            nodes,
            seed,
            repeats,
            out,
        } => {
            let model = match config {
                Some(p) => load(&p)?.model,
                None => ModelConfig::default(),
            };
            commands::benchmark(&model, nodes, seed, repeats, &out)
        }
    }
}

/// 1 for bad input, 2 for failures during a valid run.
fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err
        .chain()
        .find_map(|e| e.downcast_ref::<spin_impute::Error>())
        .is_some_and(spin_impute::Error::is_validation);
    if validation {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
