//! `drivegaze`: synthesize driving data, train the coarse-to-fine attention
//! model, evaluate predictors, and run the attention analyses.

mod cmd_analyze;
mod cmd_eval;
mod cmd_synth;
mod cmd_train;
mod common;
mod config;
mod lock;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "drivegaze", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic driving dataset under dataset_root.
    Synth(CommonArgs),
    /// Train the attention model and write a checkpoint plus a loss log.
    Train(CommonArgs),
    /// Evaluate a predictor on the validation split into report.csv.
    Eval(CommonArgs),
    /// Run speed-bucket, sweep, hard-window, and overlay analyses.
    Analyze(CommonArgs),
}

/// Every config key is also a flag; flags override the config file.
#[derive(Args)]
struct CommonArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset_root: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// coarse or coarse_fine.
    #[arg(long)]
    arch: Option<String>,
    /// Desk-scale model (56x56 input, channels divided by 8).
    #[arg(long)]
    tiny: Option<bool>,
    /// mild or aggressive.
    #[arg(long)]
    crop_policy: Option<String>,
    /// Refined prediction resolution; multiple of 112.
    #[arg(long)]
    refine_res: Option<usize>,
    /// Mandatory RNG seed; there is no wall-clock fallback.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    log_interval: Option<usize>,
    /// Gaussian baseline spread as a fraction of each image dimension.
    #[arg(long)]
    sigma_fraction: Option<f64>,
    #[arg(long)]
    n_thresholds: Option<usize>,
    /// model, gaussian, or mean_gt.
    #[arg(long)]
    predictor: Option<String>,
    /// Evaluate every n-th validation clip.
    #[arg(long)]
    eval_stride: Option<usize>,
    #[arg(long)]
    val_clips_per_sequence: Option<usize>,
    #[arg(long)]
    sequences: Option<usize>,
    #[arg(long)]
    frames_per_sequence: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
}

impl CommonArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.load_file(path)?;
        }
        let mut set = |key: &str, value: Option<String>| -> Result<()> {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
            Ok(())
        };
        let path_str = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        set("dataset_root", path_str(&self.dataset_root))?;
        set("checkpoint", path_str(&self.checkpoint))?;
        set("output_dir", path_str(&self.output_dir))?;
        set("arch", self.arch.clone())?;
        set("tiny", self.tiny.map(|v| v.to_string()))?;
        set("crop_policy", self.crop_policy.clone())?;
        set("refine_res", self.refine_res.map(|v| v.to_string()))?;
        set("seed", self.seed.map(|v| v.to_string()))?;
        set("steps", self.steps.map(|v| v.to_string()))?;
        set("batch_size", self.batch_size.map(|v| v.to_string()))?;
        set("learning_rate", self.learning_rate.map(|v| v.to_string()))?;
        set("log_interval", self.log_interval.map(|v| v.to_string()))?;
        set("sigma_fraction", self.sigma_fraction.map(|v| v.to_string()))?;
        set("n_thresholds", self.n_thresholds.map(|v| v.to_string()))?;
        set("predictor", self.predictor.clone())?;
        set("eval_stride", self.eval_stride.map(|v| v.to_string()))?;
        set(
            "val_clips_per_sequence",
            self.val_clips_per_sequence.map(|v| v.to_string()),
        )?;
        set("sequences", self.sequences.map(|v| v.to_string()))?;
        set(
            "frames_per_sequence",
            self.frames_per_sequence.map(|v| v.to_string()),
        )?;
        set("width", self.width.map(|v| v.to_string()))?;
        set("height", self.height.map(|v| v.to_string()))?;
        Ok(cfg)
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(args) => args.resolve().and_then(|c| cmd_synth::run(&c)),
        Command::Train(args) => args.resolve().and_then(|c| cmd_train::run(&c)),
        Command::Eval(args) => args.resolve().and_then(|c| cmd_eval::run(&c)),
        Command::Analyze(args) => args.resolve().and_then(|c| cmd_analyze::run(&c)),
    };
    if let Err(e) = result {
        eprintln!("error: {:#}", e);
        std::process::exit(1);
    }
}
