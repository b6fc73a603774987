//! Command-line front end: dataset evaluation, reward scoring and parsing of
//! response files, toy training and analysis, world dumps and the external
//! segmenter adapter.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use saliency_core::interface::TaskKind;

pub mod adapter;
pub mod eval;
pub mod responses;
pub mod toy;

#[derive(Parser, Debug)]
#[command(name = "saliency", version, about = "Saliency rewards, metrics and toy policy optimization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for anything random (world construction or sampling).
    #[arg(long)]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Score predicted masks against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        task: TaskKind,
        #[command(flatten)]
        common: Common,
    },
    /// Reward breakdown for every line of a responses file.
    Reward {
        #[arg(long)]
        responses: PathBuf,
        /// World configuration (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Ask an external segmenter through this directory instead of the oracle.
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        timeout_ms: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Parse and validate responses, emitting expression records.
    Parse {
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        task: TaskKind,
        #[command(flatten)]
        common: Common,
    },
    /// Train a tabular policy on the synthetic world.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Reward/confidence response-type statistics for a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Write the synthetic world's manifest and masks.
    DumpWorld {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Send the expressions of a responses file to an external segmenter and
    /// collect its masks.
    Adapter {
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        adapter_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        timeout_ms: u64,
        #[command(flatten)]
        common: Common,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Eval { pred, gt, task, common } => eval::run(&pred, &gt, task, &common),
        Command::Reward {
            responses,
            config,
            adapter,
            timeout_ms,
            common,
        } => responses::reward(&responses, config.as_deref(), adapter.as_deref(), timeout_ms, &common),
        Command::Parse { responses, task, common } => responses::parse(&responses, task, &common),
        Command::Train { config, common } => toy::train(config.as_deref(), &common),
        Command::Analyze {
            checkpoint,
            config,
            samples,
            common,
        } => toy::analyze(&checkpoint, config.as_deref(), samples, &common),
        Command::DumpWorld { config, common } => toy::dump_world(config.as_deref(), &common),
        Command::Adapter {
            responses,
            adapter_dir,
            config,
            timeout_ms,
            common,
        } => adapter::run(&responses, &adapter_dir, config.as_deref(), timeout_ms, &common),
    }
}

pub(crate) fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Writes through a temporary sibling and renames into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}
