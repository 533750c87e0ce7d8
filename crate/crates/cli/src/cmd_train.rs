//! Training subcommand: seeded sampling of augmented clips, Adam updates,
//! periodic validation CC, loss log and final checkpoint.

use crate::common::{map_dims, open_dataset, strided_validation_ends, OpenDataset};
use crate::config::RunConfig;
use crate::lock::DirLock;
use anyhow::{bail, Context, Result};
use drivegaze_core::adam::AdamConfig;
use drivegaze_core::data::{crop_sample, mirror, Dataset, SequenceRecord};
use drivegaze_core::metrics;
use drivegaze_core::model::{
    load_checkpoint, save_checkpoint, train_step, ModelParams, Optimizer, TrainItem,
};
use drivegaze_core::{ops, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

pub fn run(config: &RunConfig) -> Result<()> {
    let seed = config.seed()?;
    let out_dir = config.output_dir()?.clone();
    let _lock = DirLock::acquire(&out_dir)?;
    let open = open_dataset(config.dataset_root()?)?;
    if config.log_interval == 0 || config.batch_size == 0 {
        bail!("log_interval and batch_size must be positive");
    }

    let checkpoint_path = config
        .checkpoint
        .clone()
        .unwrap_or_else(|| out_dir.join("checkpoint.drvt"));
    let (mut params, mut opt) = init_or_resume(config, &checkpoint_path, seed)?;
    let start_step = opt.step_count();

    let pool: Vec<(usize, usize)> = open
        .splits
        .iter()
        .enumerate()
        .flat_map(|(si, sp)| sp.train_clip_ends.iter().map(move |&e| (si, e)))
        .collect();
    if pool.is_empty() {
        bail!("no training clips in the dataset");
    }
    let val_ends: Vec<(usize, usize)> = open
        .splits
        .iter()
        .enumerate()
        .flat_map(|(si, sp)| {
            let stride =
                (sp.validation_clip_ends.len() / config.val_clips_per_sequence.max(1)).max(1);
            strided_validation_ends(sp, stride)
                .into_iter()
                .take(config.val_clips_per_sequence)
                .map(move |e| (si, e))
                .collect::<Vec<_>>()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x74726169); // train stream
    let mut log = String::from("step,loss1,loss2,val_cc\n");
    for step in 1..=config.steps {
        let batch: Vec<TrainItem> = (0..config.batch_size)
            .map(|_| {
                let (si, end) = pool[rng.gen_range(0..pool.len())];
                build_item(&open.dataset, &open.dataset.sequences[si], end, config, &mut rng)
            })
            .collect::<Result<_>>()?;
        let (l1, l2) = train_step(&mut params, &batch, &mut opt)?;
        if step % config.log_interval == 0 {
            let val_cc = validation_cc(&open, &params, &val_ends)?;
            let row = format!(
                "{},{:.6},{:.6},{}\n",
                start_step + step as u64,
                l1,
                l2,
                crate::common::cell(val_cc)
            );
            log.push_str(&row);
            print!("{}", row);
        }
    }
    std::fs::write(out_dir.join("loss_log.csv"), &log)
        .with_context(|| format!("writing {}", out_dir.join("loss_log.csv").display()))?;
    save_checkpoint(&params, Some(&opt), &checkpoint_path)?;
    println!(
        "saved checkpoint {} at adam step {}",
        checkpoint_path.display(),
        opt.step_count()
    );
    Ok(())
}

fn init_or_resume(
    config: &RunConfig,
    checkpoint_path: &PathBuf,
    seed: u64,
) -> Result<(ModelParams, Optimizer)> {
    if checkpoint_path.is_file() {
        let (params, opt) = load_checkpoint(checkpoint_path)?;
        let requested = config.net_config()?;
        if params.config != requested {
            eprintln!(
                "warning: resuming with the checkpoint's architecture ({}), ignoring flags",
                params.config.arch.as_str()
            );
        }
        println!(
            "resumed from {} at adam step {}",
            checkpoint_path.display(),
            opt.step_count()
        );
        Ok((params, opt))
    } else {
        let net = config.net_config()?;
        let params = ModelParams::init(net, seed)?;
        let adam = AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        };
        let opt = Optimizer::new(&params, adam);
        Ok((params, opt))
    }
}

fn build_item(
    dataset: &Dataset,
    seq: &SequenceRecord,
    end: usize,
    config: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainItem> {
    let net = config.net_config()?;
    let clip = dataset.clip(seq, end)?;
    let map = dataset.map(seq, end)?;
    let sample = crop_sample(
        &clip,
        &map,
        config.crop_policy,
        net.input_size,
        net.refine_res,
        rng,
    )?;
    // One coin decides the flip; it must move every stream identically.
    let (cropped_clip, cropped_map, flipped) =
        mirror(&sample.cropped_clip, &sample.cropped_map, rng);
    let (resized_clip, full_map, last_frame) = if flipped {
        (
            ops::flip_horizontal(&sample.resized_clip),
            ops::flip_horizontal(&sample.full_map),
            ops::flip_horizontal(&sample.last_frame),
        )
    } else {
        (sample.resized_clip, sample.full_map, sample.last_frame)
    };
    Ok(TrainItem {
        cropped_clip,
        cropped_map,
        resized_clip,
        full_map,
        last_frame,
    })
}

/// Mean CC between refined predictions and ground truth on a fixed subset of
/// validation clips, at the native map resolution.
fn validation_cc(
    open: &OpenDataset,
    params: &ModelParams,
    val_ends: &[(usize, usize)],
) -> Result<Option<f64>> {
    let (h, w) = map_dims(&open.dataset)?;
    let mut ccs = Vec::new();
    for &(si, end) in val_ends {
        let seq = &open.dataset.sequences[si];
        let frames: Vec<Tensor> = (end + 1 - 16..=end)
            .map(|i| open.dataset.frame(seq, i).map(|t| (*t).clone()))
            .collect::<Result<_, _>>()?;
        let pred = ops::resize_bilinear(&params.predict(&frames)?, h, w)?;
        let gt = open.dataset.map(seq, end)?;
        if let Some(c) = metrics::cc(&pred, &gt)? {
            ccs.push(c);
        }
    }
    if ccs.is_empty() {
        Ok(None)
    } else {
        Ok(Some(ccs.iter().sum::<f64>() / ccs.len() as f64))
    }
}
