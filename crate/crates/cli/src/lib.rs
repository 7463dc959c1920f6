//! The `wasr` command line: dataset synthesis, training, inference,
//! evaluation, gradient checks and the ablation study.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::ablate::{run_ablation, AblationData};
use crate::config::{split_overrides, RunConfig};
use crate::error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(
    name = "wasr",
    about = "Maritime obstacle segmentation pipeline",
    after_help = "Any config key can be given as --key value (see `wasr keys`); --no-imu is short for --use-imu false."
)]
struct Cli {
    /// key=value file applied before command-line overrides.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset, or continue from a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint directory to continue from; its stored config wins.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict masks, obstacles and water edges.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write colour overlays.
        #[arg(long)]
        overlay: bool,
    },
    /// Score predictions against ground truth, or F-measures of raw counts.
    Eval {
        #[arg(long, required_unless_present = "counts")]
        pred: Option<PathBuf>,
        #[arg(long, required_unless_present = "counts")]
        gt: Option<PathBuf>,
        /// Report directory; defaults to the prediction directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// TP,FP,FN triple; repeatable; `-` reads triples from stdin.
        #[arg(long, conflicts_with_all = ["pred", "gt"], allow_hyphen_values = true)]
        counts: Vec<String>,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        /// Add an op with a deliberately wrong backward.
        #[arg(long)]
        inject_fault: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and compare WaSR, WaSR_NOWS and WaSR_NOIMU.
    Ablate {
        /// Dataset to split into training frames and `ablate_heldout` held-out
        /// frames; without it, frames are generated per seed.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List config keys with their defaults.
    Keys,
}

fn load_config(path: Option<&PathBuf>, overrides: &[(String, String)]) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = path {
        cfg.apply_file(p)?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs the command line `args` (without the program name).
pub fn run(args: &[String]) -> CliResult<()> {
    let (overrides, rest) = split_overrides(args)?;
    let argv = std::iter::once("wasr".to_string()).chain(rest);
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let msg = e.render().to_string();
            return Err(CliError::Usage(msg.trim_start_matches("error: ").trim_end().to_string()));
        }
    };
    let cfg = load_config(cli.config.as_ref(), &overrides)?;
    match cli.command {
        Command::Synth { out } => commands::synth(&cfg, &out).map(drop),
        Command::Train { data, out, resume } => commands::train_cmd(&cfg, &data, &out, resume.as_deref()),
        Command::Infer {
            checkpoint,
            data,
            out,
            overlay,
        } => commands::infer_cmd(&cfg, &checkpoint, &data, &out, overlay).map(drop),
        Command::Eval { pred, gt, out, counts } => {
            if counts.is_empty() {
                let (pred, gt) = (pred.expect("required"), gt.expect("required"));
                commands::eval_cmd(&cfg, &pred, &gt, out.as_deref()).map(drop)
            } else {
                commands::eval_counts(&counts).map(drop)
            }
        }
        Command::Gradcheck { inject_fault, out } => commands::gradcheck_cmd(&cfg, inject_fault, out.as_deref()),
        Command::Ablate { data, out } => {
            let data = match data {
                Some(dir) => {
                    let mut frames = wasr::dataset::read_dataset(&dir)?;
                    let held = cfg.ablate_heldout()?;
                    if held == 0 || held >= frames.len() {
                        return Err(CliError::Usage(format!(
                            "ablate_heldout = {held} must leave training frames out of {}",
                            frames.len()
                        )));
                    }
                    let heldout = frames.split_off(frames.len() - held);
                    AblationData::Fixed { train: frames, heldout }
                }
                None => AblationData::Generated {
                    params: cfg.scene_params()?,
                    train_count: cfg.count()?,
                    heldout_count: cfg.ablate_heldout()?,
                },
            };
            let report = run_ablation(&cfg, &data)?;
            print!("{}", report.to_table());
            if let Some(dir) = out {
                cfg.echo(&dir)?;
                report.write(&dir)?;
            }
            Ok(())
        }
        Command::Keys => {
            print!("{}", config::key_table());
            Ok(())
        }
    }
}

/// Runs and converts the outcome into a process exit code.
pub fn main_exit_code(args: &[String]) -> i32 {
    match run(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("wasr: {e}");
            e.exit_code()
        }
    }
}
