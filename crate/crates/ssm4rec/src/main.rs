//! Thin command-line front end. All behavior lives in the library's
//! `commands` module; this file only parses flags into config overrides and
//! maps errors to exit codes (0 success, 2 validation failure, 3 runtime
//! error).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ssm4rec::commands;
use ssm4rec::config::RunConfig;
use ssm4rec::error::Error;

#[derive(Parser)]
#[command(
    name = "ssm4rec",
    about = "Selective state-space sequential recommender",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Each maps onto a configuration key and
/// overrides both the defaults and the config file.
#[derive(Args)]
struct Common {
    /// Key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for initialization, shuffling, and dropout.
    #[arg(long)]
    seed: Option<u64>,
    /// Raw interaction log, or "fixture" for the built-in dataset.
    #[arg(long)]
    dataset: Option<String>,
    /// Input format: ml-1m, amazon-csv, or tsv.
    #[arg(long)]
    format: Option<String>,
    /// Exclude each user's already-seen items when ranking (true/false).
    #[arg(long)]
    mask_history: Option<bool>,
    /// Stacked layer count.
    #[arg(long)]
    num_layers: Option<usize>,
    /// Add learned positional embeddings.
    #[arg(long)]
    use_pe: bool,
    /// Drop the position-wise feed-forward sublayer.
    #[arg(long)]
    no_pffn: bool,
    /// Drop layer normalization inside the layers.
    #[arg(long)]
    no_layernorm: bool,
    /// Directory for checkpoints, histories, and reports.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Extra key=value override; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, filter, split, and cache a dataset; print its statistics.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Fail unless stats equal "users,items,interactions".
        #[arg(long)]
        expect: Option<String>,
        /// Re-prepare even when a cache entry exists.
        #[arg(long)]
        force_rebuild: bool,
    },
    /// Train from scratch; writes the best checkpoint and epoch history.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score a stored checkpoint on a held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path (default: <out_dir>/checkpoint.bin).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time the recurrent layer against quadratic attention over lengths.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate the six-variant ablation matrix.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    /// Flags in override order; `--set` pairs come last so they win.
    fn overrides(&self) -> Result<Vec<(String, String)>, Error> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut push = |key: &str, value: String| out.push((key.to_string(), value));
        if let Some(v) = self.seed {
            push("seed", v.to_string());
        }
        if let Some(v) = &self.dataset {
            push("dataset", v.clone());
        }
        if let Some(v) = &self.format {
            push("format", v.clone());
        }
        if let Some(v) = self.mask_history {
            push("mask_history", v.to_string());
        }
        if let Some(v) = self.num_layers {
            push("num_layers", v.to_string());
        }
        if self.use_pe {
            push("use_pe", "true".to_string());
        }
        if self.no_pffn {
            push("use_pffn", "false".to_string());
        }
        if self.no_layernorm {
            push("use_layernorm", "false".to_string());
        }
        if let Some(v) = &self.out_dir {
            push("out_dir", v.display().to_string());
        }
        for pair in &self.set {
            let (k, v) = pair.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set wants key=value, got {pair:?}"))
            })?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    fn load(&self) -> Result<RunConfig, Error> {
        let text = match &self.config {
            Some(path) => Some(std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?),
            None => None,
        };
        RunConfig::load(text.as_deref(), &self.overrides()?)
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Prepare {
            common,
            expect,
            force_rebuild,
        } => {
            commands::cmd_prepare(&common.load()?, expect.as_deref(), force_rebuild)?;
        }
        Command::Train { common } => {
            commands::cmd_train(&common.load()?)?;
        }
        Command::Eval { common, checkpoint } => {
            commands::cmd_eval(&common.load()?, checkpoint.as_deref())?;
        }
        Command::Bench { common } => {
            commands::cmd_bench(&common.load()?)?;
        }
        Command::Ablate { common } => {
            commands::cmd_ablate(&common.load()?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
