//! Library side of the `pipenet` command-line tool.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use pipenet_core::lfv::LfvConfig;

use crate::config::{RunConfig, SEED_ENV};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "pipenet", version, about = "Multi-modal face anti-spoofing workflow")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, short = 'c')]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed (overrides PIPENET_SEED and `seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Portfolio name, P1..P5 (overrides `model.portfolio`).
    #[arg(long)]
    pub portfolio: Option<String>,
    /// Any config value as `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic train and test datasets under <out>/data.
    Synth(Common),
    /// Train a model and keep the best checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Limited frame vote over a per-frame score file.
    Vote {
        /// Tab-separated `video_id frame_index probability` lines.
        scores: PathBuf,
        #[arg(long, default_value_t = LfvConfig::default().lambda)]
        lambda: f64,
        #[arg(long, default_value_t = LfvConfig::default().tau)]
        tau: f64,
        #[arg(long)]
        max_iter: Option<usize>,
    },
    /// Score every test video under original, reversed and shuffled frame order.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate several portfolios under one configuration.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated portfolio names (overrides `eval.portfolios`).
        #[arg(long, value_delimiter = ',')]
        portfolios: Option<Vec<String>>,
        /// Repeats per portfolio (overrides `eval.repeats`).
        #[arg(long)]
        repeats: Option<usize>,
    },
}

fn quoted(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

/// Effective configuration for a command: file, then environment seed, then flags.
pub fn resolve(common: &Common, extra: &[String]) -> Result<RunConfig, CliError> {
    let mut overrides = common.set.clone();
    if let Some(out) = &common.out {
        overrides.push(format!("out_dir={}", quoted(&out.to_string_lossy())));
    }
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(p) = &common.portfolio {
        overrides.push(format!("model.portfolio={}", quoted(p)));
    }
    overrides.extend_from_slice(extra);
    let env_seed = std::env::var(SEED_ENV).ok();
    config::load(common.config.as_deref(), &overrides, env_seed.as_deref())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(common) => commands::cmd_synth(&resolve(&common, &[])?),
        Command::Train { common, resume } => commands::cmd_train(&resolve(&common, &[])?, resume.as_deref()),
        Command::Eval { common, checkpoint } => commands::cmd_eval(&resolve(&common, &[])?, checkpoint.as_deref()),
        Command::Vote {
            scores,
            lambda,
            tau,
            max_iter,
        } => {
            let lfv = LfvConfig { lambda, tau, max_iter };
            print!("{}", commands::cmd_vote(&scores, &lfv)?);
            Ok(())
        }
        Command::Probe { common, checkpoint } => commands::cmd_probe(&resolve(&common, &[])?, checkpoint.as_deref()),
        Command::Sweep {
            common,
            portfolios,
            repeats,
        } => {
            let mut extra = Vec::new();
            if let Some(p) = portfolios {
                let list: Vec<String> = p.iter().map(|s| quoted(s)).collect();
                extra.push(format!("eval.portfolios=[{}]", list.join(", ")));
            }
            if let Some(r) = repeats {
                extra.push(format!("eval.repeats={r}"));
            }
            commands::cmd_sweep(&resolve(&common, &extra)?)
        }
    }
}
