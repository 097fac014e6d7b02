//! `bedfuse`: dataset generation, training and evaluation from a TOML config.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use bedfuse::harness::config::ExperimentConfig;
use bedfuse::harness::manifest::{RunRecord, MANIFEST_FILE};
use bedfuse::harness::pipeline;
use bedfuse::{Error, Modality, Result};
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "bedfuse", version, about = "Multimodal in-bed pose estimation experiments")]
struct Cli {
    /// Experiment config (TOML). Without one, built-in defaults apply.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Repeat for debug (-v) or trace (-vv) logging.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic multimodal dataset into --out.
    GenData {
        /// Overrides dataset.subjects.
        #[arg(long)]
        subjects: Option<u32>,
        /// Overrides dataset.poses.
        #[arg(long)]
        poses: Option<u32>,
    },
    /// Train a single-modality pose network.
    TrainUnimodal {
        /// Overrides train.modality.
        #[arg(long)]
        modality: Option<Modality>,
    },
    /// Train a fusion model per the [fusion] section.
    TrainFusion,
    /// Train the cross-modality translator per the [gan] section.
    TrainCgan,
    /// Evaluate eval.checkpoint on eval.split.
    Evaluate,
    /// Translate source images, composite them, and evaluate the fusion model on them.
    ReconstructEval,
    /// Draw the loss CSVs listed in plot.inputs.
    Plot,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            let mut c = ExperimentConfig::default();
            c.resolve_paths(&std::env::current_dir().map_err(|e| Error::io(".", e))?);
            c
        }
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    match cli.command {
        Command::TrainUnimodal { modality: Some(m) } => cfg.train.modality = Some(m),
        Command::GenData { subjects, poses } => {
            cfg.dataset.subjects = subjects.unwrap_or(cfg.dataset.subjects);
            cfg.dataset.poses = poses.unwrap_or(cfg.dataset.poses);
        }
        _ => {}
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<RunRecord> {
    let cfg = load_config(cli)?;
    let out = &cli.out;
    match cli.command {
        Command::GenData { .. } => pipeline::gen_data(&cfg, out),
        Command::TrainUnimodal { .. } => pipeline::train_unimodal(&cfg, out),
        Command::TrainFusion => pipeline::train_fusion(&cfg, out),
        Command::TrainCgan => pipeline::train_cgan(&cfg, out),
        Command::Evaluate => pipeline::evaluate(&cfg, out),
        Command::ReconstructEval => pipeline::reconstruct_eval(&cfg, out),
        Command::Plot => pipeline::emit_plots(&cfg, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(rec) => {
            log::info!(
                "{} finished in {:.1}s; {} artifacts listed in {}",
                rec.command,
                rec.wall_clock_secs,
                rec.artifacts.len(),
                cli.out.join(MANIFEST_FILE).display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
