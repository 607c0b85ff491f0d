//! `style-evo`: command-line front end for style evolution runs.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 when the command itself fails.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "style-evo",
    version,
    about = "Feature-space style evolution for single-domain generalization"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// `key = value` run configuration; defaults apply without one.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Run seed. Falls back to STYLE_EVO_SEED, then the config's `seed` key, then 0.
    #[arg(long, global = true, env = "STYLE_EVO_SEED")]
    pub seed: Option<u64>,
    /// Output file.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Prompt chain level, overriding `prompt.level`.
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub level: Option<u8>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Vocabulary inspection.
    Vocab {
        #[command(subcommand)]
        action: VocabAction,
    },
    /// Prompt chain inspection.
    Chain {
        #[command(subcommand)]
        action: ChainAction,
    },
    /// Style evolution alone.
    Style {
        #[command(subcommand)]
        action: StyleAction,
    },
    /// Style evolution, transfer training and evaluation; writes a checkpoint
    /// to --out and a report next to it.
    Train,
    /// Evaluates a checkpoint on the source and shifted domains.
    Eval { checkpoint: PathBuf },
    /// Every ablation row over `ablation.seeds`.
    Ablate,
    /// Writes fake-encoder embeddings of every string a run can encode.
    ExportFakeEmbeddings,
}

#[derive(Debug, Subcommand)]
pub enum VocabAction {
    /// Prints the vocabularies and prompt templates.
    List,
}

#[derive(Debug, Subcommand)]
pub enum ChainAction {
    /// Samples one chain from --seed and prints its texts and embedding norms.
    Sample,
}

#[derive(Debug, Subcommand)]
pub enum StyleAction {
    /// Trains the style bank and writes it to --out.
    Train,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(commands::Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
