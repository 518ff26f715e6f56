use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ctg_cli::{commands, CliError};

/// Compositional temporal grounding of natural-language queries in video.
#[derive(Parser)]
#[command(name = "ctg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate {
        /// Generator config (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Clause masks for bracketed trees.
    Segment {
        /// JSON Lines of {id, tokens, ptb}.
        #[arg(long)]
        dataset: PathBuf,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and write a checkpoint plus training log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank every segment for every query of a dataset.
    Ground {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Enables the novelty analysis together with a training set.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate the full model and its six ablations.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert external annotations into a dataset file.
    Adapt {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        features_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "rgb,flow")]
        modalities: Vec<String>,
    },
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Generate { config, seed, out } => commands::run_generate(config.as_deref(), seed, &out),
        Command::Segment { dataset, out } => commands::run_segment(&dataset, out.as_deref()),
        Command::Train { config, seed, out } => commands::run_train(&config, seed, &out),
        Command::Ground {
            config,
            checkpoint,
            dataset,
            out,
        } => commands::run_ground(config.as_deref(), &checkpoint, &dataset, &out),
        Command::Eval {
            predictions,
            dataset,
            report,
            config,
            checkpoint,
        } => commands::run_eval(&predictions, &dataset, &report, config.as_deref(), checkpoint.as_deref()),
        Command::Ablate { config, seed, out } => commands::run_ablate(&config, seed, &out),
        Command::Adapt {
            annotations,
            features_dir,
            out,
            modalities,
        } => commands::run_adapt(&annotations, &features_dir, &out, &modalities),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
