mod commands;
mod config;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::ConfigProblem;

/// Selective prompt tuning: train a bank of soft prompts with a dense
/// retriever over a frozen miniature language model.
#[derive(Parser)]
#[command(name = "spt", version, about)]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dotted-path override, e.g. --set train.objective.lambda2=0
    /// (repeatable; applied after the config file).
    #[arg(long = "set", global = true)]
    sets: Vec<String>,

    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory; must not already contain a run.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-regime dialogue corpus.
    Synth,
    /// Train the backbone language model on a corpus, then freeze it.
    Pretrain,
    /// Train the prompt bank and retriever against a frozen backbone.
    Train {
        /// Resume from a run checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a trained run: perplexity, generation metrics, selection audit.
    Eval,
    /// Decode responses for contexts from a JSONL file.
    Generate {
        /// Input contexts (JSONL; response field optional).
        #[arg(long)]
        input: PathBuf,
    },
    /// Run the loss ablations and the bank-size sweep.
    Ablate,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new()
            .filter_or("SPT_LOG_LEVEL", "info"),
    )
    .format_timestamp(None)
    .init();

    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_config_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let config = config::load_config(cli.config.as_deref(), &cli.sets, cli.seed)
        .map_err(|e| anyhow::anyhow!(ConfigProblem(format!("{e:#}"))))?;
    let out = cli
        .out
        .as_deref()
        .ok_or_else(|| anyhow::anyhow!(ConfigProblem("--out is required".into())))?;
    match cli.command {
        Command::Synth => commands::cmd_synth(&config, out),
        Command::Pretrain => commands::cmd_pretrain(&config, out),
        Command::Train { resume } => commands::cmd_train(&config, out, resume.as_deref()),
        Command::Eval => commands::cmd_eval(&config, out),
        Command::Generate { input } => commands::cmd_generate(&config, out, &input),
        Command::Ablate => commands::cmd_ablate(&config, out),
    }
}

fn is_config_error(err: &anyhow::Error) -> bool {
    if err.downcast_ref::<ConfigProblem>().is_some() {
        return true;
    }
    matches!(
        err.downcast_ref::<spt_core::SptError>(),
        Some(spt_core::SptError::Config(_))
    )
}
