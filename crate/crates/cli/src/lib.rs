//! Command-line orchestration of the flow-guided adaptation pipeline.

pub mod config;
pub mod fsio;
pub mod pipeline;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use crate::config::PipelineConfig;
use crate::fsio::Files;

#[derive(Debug, Parser)]
#[command(
    name = "flowadapt",
    version,
    about = "Flow-guided class-balanced self-training for segmentation domain adaptation",
    after_help = "Any config field can be overridden with --dotted.path=value, e.g. --flow.encoding=none."
)]
pub struct Cli {
    /// JSON pipeline configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Top-level seed; every stage seed derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic source and target datasets.
    Synth,
    /// Estimate and encode optical flow for every frame pair.
    Flow,
    /// Train the source-only model.
    Train,
    /// Run class-balanced self-training on the target domain.
    Adapt,
    /// Score a checkpoint on the held-out target labels.
    Eval {
        /// Defaults to the adapted model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-class IoU deltas of report B relative to report A.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration.
    Config,
}

/// Long flags that belong to the parser rather than the config.
const OWN_FLAGS: &[&str] = &["config", "seed", "checkpoint", "out", "help", "version"];

/// Splits `--key=value` config overrides from the arguments clap parses.
pub fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        if let Some((k, v)) = arg.strip_prefix("--").and_then(|a| a.split_once('=')) {
            if !OWN_FLAGS.contains(&k) {
                overrides.push((k.to_string(), v.to_string()));
                continue;
            }
        }
        rest.push(arg);
    }
    (rest, overrides)
}

/// Parses `args` (program name first), runs the command and returns the
/// file reads it performed along with a one-line summary.
pub fn run(args: Vec<String>) -> Result<(String, Vec<PathBuf>)> {
    let (rest, mut overrides) = split_overrides(args);
    let cli = Cli::try_parse_from(rest)?;
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    let cfg = PipelineConfig::resolve(cli.config.as_deref(), &overrides)?;
    let eval_access = matches!(cli.command, Command::Eval { .. } | Command::Compare { .. });
    let files = Files::new(eval_access);
    let summary = match &cli.command {
        Command::Synth => {
            let m = pipeline::cmd_synth(&cfg)?;
            format!(
                "wrote {} source and {} target pairs to {}",
                m.source.count,
                m.target.count,
                cfg.data_dir.display()
            )
        }
        Command::Flow => {
            let n = pipeline::cmd_flow(&files, &cfg)?;
            format!("estimated flow for {n} pairs")
        }
        Command::Train => {
            let t = pipeline::cmd_train(&files, &cfg)?;
            format!(
                "source mIoU {:.2}, checkpoint {}",
                t.source_report.miou,
                t.checkpoint.display()
            )
        }
        Command::Adapt => {
            let a = pipeline::cmd_adapt(&files, &cfg)?;
            format!(
                "{} rounds, checkpoint {}",
                a.rounds.len(),
                a.checkpoint.display()
            )
        }
        Command::Eval { checkpoint, out } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| {
                pipeline::Layout::new(&cfg)
                    .adapt_dir()
                    .join(pipeline::MODEL_FILE)
            });
            let (path, report) = pipeline::cmd_eval(&files, &cfg, &ckpt, out.as_deref())?;
            format!("target mIoU {:.2}, report {}", report.miou, path.display())
        }
        Command::Compare { a, b, out } => {
            let (path, cmp) = pipeline::cmd_compare(&files, &cfg, a, b, out.as_deref())?;
            let moving = cmp
                .moving_delta()
                .map(|d| format!("{d:+.2}"))
                .unwrap_or_else(|| "n/a".into());
            format!(
                "mIoU delta {:+.2}, moving-class delta {moving}, report {}",
                cmp.miou_delta(),
                path.display()
            )
        }
        Command::Config => cfg.to_json().context("serializing config")?,
    };
    Ok((summary, files.reads()))
}
