//! Flat key=value run configuration with command-line overrides.

use anyhow::{bail, Context, Result};
use drivegaze_core::data::CropPolicy;
use drivegaze_core::model::{ArchTag, NetConfig};
use std::path::PathBuf;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Predictor {
    Model,
    Gaussian,
    MeanGt,
}

impl Predictor {
    pub fn parse(s: &str) -> Option<Predictor> {
        match s {
            "model" => Some(Predictor::Model),
            "gaussian" => Some(Predictor::Gaussian),
            "mean_gt" => Some(Predictor::MeanGt),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Predictor::Model => "model",
            Predictor::Gaussian => "gaussian",
            Predictor::MeanGt => "mean_gt",
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub dataset_root: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub arch: ArchTag,
    pub tiny: bool,
    pub crop_policy: CropPolicy,
    pub refine_res: Option<usize>,
    pub seed: Option<u64>,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub log_interval: usize,
    pub sigma_fraction: f64,
    pub n_thresholds: usize,
    pub predictor: Option<Predictor>,
    pub eval_stride: usize,
    pub val_clips_per_sequence: usize,
    pub sequences: usize,
    pub frames_per_sequence: usize,
    pub width: usize,
    pub height: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_root: None,
            checkpoint: None,
            output_dir: None,
            arch: ArchTag::CoarseFine,
            tiny: false,
            crop_policy: CropPolicy::Mild,
            refine_res: None,
            seed: None,
            steps: 500,
            batch_size: 4,
            learning_rate: 1e-3,
            log_interval: 10,
            sigma_fraction: 0.25,
            n_thresholds: 10,
            predictor: None,
            eval_stride: 4,
            val_clips_per_sequence: 8,
            sequences: 6,
            frames_per_sequence: 480,
            width: 96,
            height: 64,
        }
    }
}

impl RunConfig {
    /// Apply one `key=value` assignment from a config file or flag.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset_root" => self.dataset_root = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "output_dir" => self.output_dir = Some(PathBuf::from(value)),
            "arch" => {
                self.arch = ArchTag::parse(value)
                    .with_context(|| format!("unknown arch {:?}", value))?
            }
            "tiny" => self.tiny = parse_bool(value)?,
            "crop_policy" => {
                self.crop_policy = CropPolicy::parse(value)
                    .with_context(|| format!("unknown crop_policy {:?}", value))?
            }
            "refine_res" => self.refine_res = Some(value.parse()?),
            "seed" => self.seed = Some(value.parse()?),
            "steps" => self.steps = value.parse()?,
            "batch_size" => self.batch_size = value.parse()?,
            "learning_rate" => self.learning_rate = value.parse()?,
            "log_interval" => self.log_interval = value.parse()?,
            "sigma_fraction" => self.sigma_fraction = value.parse()?,
            "n_thresholds" => self.n_thresholds = value.parse()?,
            "predictor" => {
                self.predictor = Some(
                    Predictor::parse(value)
                        .with_context(|| format!("unknown predictor {:?}", value))?,
                )
            }
            "eval_stride" => self.eval_stride = value.parse()?,
            "val_clips_per_sequence" => self.val_clips_per_sequence = value.parse()?,
            "sequences" => self.sequences = value.parse()?,
            "frames_per_sequence" => self.frames_per_sequence = value.parse()?,
            "width" => self.width = value.parse()?,
            "height" => self.height = value.parse()?,
            _ => bail!("unknown config key {:?}", key),
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &PathBuf) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("{}:{}: expected key=value", path.display(), lineno + 1))?;
            self.set(key.trim(), value.trim())
                .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
        }
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .context("seed is mandatory (set seed=N; wall-clock seeding is not supported)")
    }

    pub fn dataset_root(&self) -> Result<&PathBuf> {
        self.dataset_root.as_ref().context("dataset_root is required")
    }

    pub fn output_dir(&self) -> Result<&PathBuf> {
        self.output_dir.as_ref().context("output_dir is required")
    }

    /// Effective refinement resolution: explicit value, or the architecture
    /// default (112 tiny, 448 full). Must be a multiple of 112.
    pub fn effective_refine_res(&self) -> Result<usize> {
        let r = self
            .refine_res
            .unwrap_or(if self.tiny { 112 } else { 448 });
        if r == 0 || r % 112 != 0 {
            bail!("refine_res {} must be a positive multiple of 112", r);
        }
        Ok(r)
    }

    pub fn net_config(&self) -> Result<NetConfig> {
        let base = if self.tiny {
            NetConfig::tiny(self.arch)
        } else {
            NetConfig::full(self.arch)
        };
        let cfg = NetConfig {
            refine_res: self.effective_refine_res()?,
            ..base
        };
        cfg.validate().map_err(anyhow::Error::from)?;
        Ok(cfg)
    }
}

fn parse_bool(value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("expected a boolean, got {:?}", value),
    }
}
