//! Analysis subcommand: speed buckets, sequence mean/mode, threshold sweep,
//! hard sub-sequences, deviation overlay, and category rank agreement.

use crate::common::{
    cell, map_dims, open_dataset, strided_validation_ends, write_text, OpenDataset, PredictorImpl,
};
use crate::config::{Predictor, RunConfig};
use crate::lock::DirLock;
use anyhow::Result;
use drivegaze_core::analysis::{
    category_rank_agreement, deviation_overlay, select_hard_subsequences, sequence_mean_and_mode,
    spatial_spread, speed_bucket_maps, threshold_sweep, CategorySweep, HardSelection,
    CATEGORY_NAMES,
};
use drivegaze_core::io::{write_pgm, write_ppm};
use drivegaze_core::Tensor;
use std::fmt::Write as _;
use std::path::Path;

pub fn run(config: &RunConfig) -> Result<()> {
    let _seed = config.seed()?;
    let out_dir = config.output_dir()?.clone();
    let _lock = DirLock::acquire(&out_dir)?;
    let open = open_dataset(config.dataset_root()?)?;
    let (h, w) = map_dims(&open.dataset)?;

    write_speed_buckets(&open, &out_dir)?;
    write_means_and_modes(&open, &out_dir)?;
    write_hard_windows(&open, &out_dir)?;

    let has_seg = segmentation_present(&open);
    let gt_sweep = if has_seg {
        Some(write_gt_sweep(&open, config.n_thresholds, &out_dir)?)
    } else {
        eprintln!("warning: segmentation maps missing; threshold sweep skipped");
        None
    };

    // Prediction-side analyses: the checkpointed model when available, the
    // centered Gaussian otherwise.
    let kind = if config.checkpoint.is_some() {
        Predictor::Model
    } else {
        eprintln!("warning: no checkpoint given; prediction analyses use the gaussian baseline");
        Predictor::Gaussian
    };
    let predictor = PredictorImpl::build(kind, config, &open)?;
    write_prediction_analyses(&open, config, &predictor, gt_sweep.as_ref(), h, w, &out_dir)?;

    println!("analysis written under {}", out_dir.display());
    Ok(())
}

fn segmentation_present(open: &OpenDataset) -> bool {
    open.dataset.sequences.iter().all(|seq| {
        seq.frames
            .first()
            .map(|f| open.dataset.root.join(&f.seg_path).is_file())
            .unwrap_or(false)
    })
}

fn write_speed_buckets(open: &OpenDataset, out_dir: &Path) -> Result<()> {
    let mut items = Vec::new();
    for seq in &open.dataset.sequences {
        for (i, f) in seq.frames.iter().enumerate() {
            items.push((open.dataset.map(seq, i)?, f.speed_kmh, f.landscape));
        }
    }
    let summary =
        speed_bucket_maps(items.iter().map(|(m, s, l)| (&**m, *s, *l)))?;
    let mut csv =
        String::from("bucket,lo_kmh,hi_kmh,count,downtown,countryside,highway,spread\n");
    for (i, b) in summary.buckets.iter().enumerate() {
        let spread = match &b.mean_map {
            Some(m) => {
                write_pgm(&out_dir.join(format!("bucket_{}.pgm", i)), m)?;
                cell(Some(spatial_spread(m)?))
            }
            None => String::new(),
        };
        let hi = if b.range.1.is_finite() {
            format!("{}", b.range.1)
        } else {
            "inf".to_string()
        };
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            i,
            b.range.0,
            hi,
            b.count,
            b.landscape_counts[0],
            b.landscape_counts[1],
            b.landscape_counts[2],
            spread
        );
    }
    write_text(&out_dir.join("buckets.csv"), &csv)
}

fn write_means_and_modes(open: &OpenDataset, out_dir: &Path) -> Result<()> {
    let mut csv = String::from("sequence_id,mode_y,mode_x\n");
    for seq in &open.dataset.sequences {
        let maps: Vec<Tensor> = (0..seq.len())
            .map(|i| open.dataset.map(seq, i).map(|t| (*t).clone()))
            .collect::<Result<_, _>>()?;
        let (mean, mode) = sequence_mean_and_mode(&maps)?;
        write_pgm(&out_dir.join(format!("mean_{}.pgm", seq.id)), &mean)?;
        let _ = writeln!(csv, "{},{},{}", seq.id, mode.0, mode.1);
    }
    write_text(&out_dir.join("modes.csv"), &csv)
}

fn write_hard_windows(open: &OpenDataset, out_dir: &Path) -> Result<()> {
    let mut csv = String::from("sequence_id,start_frame,end_frame\n");
    for seq in &open.dataset.sequences {
        let maps: Vec<Tensor> = (0..seq.len())
            .map(|i| open.dataset.map(seq, i).map(|t| (*t).clone()))
            .collect::<Result<_, _>>()?;
        match select_hard_subsequences(&maps, 16)? {
            HardSelection::Windows(wins) => {
                for (a, b) in wins {
                    let _ = writeln!(csv, "{},{},{}", seq.id, a, b);
                }
            }
            HardSelection::Unselectable => {
                eprintln!(
                    "warning: sequence {} has a constant mean map; hard mining skipped",
                    seq.id
                );
            }
        }
    }
    write_text(&out_dir.join("hard_windows.csv"), &csv)
}

fn sweep_csv(sweep: &CategorySweep) -> String {
    let mut csv = String::from("threshold");
    for name in CATEGORY_NAMES {
        csv.push(',');
        csv.push_str(name);
    }
    csv.push('\n');
    for (t, props) in sweep.thresholds.iter().zip(&sweep.proportions) {
        let _ = write!(csv, "{:.6}", t);
        match props {
            Some(p) => {
                for v in p {
                    let _ = write!(csv, ",{:.6}", v);
                }
            }
            None => {
                // Empty-mask threshold: flagged by empty cells.
                for _ in CATEGORY_NAMES {
                    csv.push(',');
                }
            }
        }
        csv.push('\n');
    }
    csv.push_str("slope");
    for s in &sweep.slopes {
        let _ = write!(csv, ",{:.6}", s);
    }
    csv.push('\n');
    csv
}

fn write_gt_sweep(
    open: &OpenDataset,
    n_thresholds: usize,
    out_dir: &Path,
) -> Result<CategorySweep> {
    let mut maps = Vec::new();
    let mut segs = Vec::new();
    for seq in &open.dataset.sequences {
        for i in 0..seq.len() {
            maps.push((*open.dataset.map(seq, i)?).clone());
            segs.push((*open.dataset.seg(seq, i)?).clone());
        }
    }
    let pairs: Vec<(&Tensor, &Tensor)> = maps.iter().zip(segs.iter()).collect();
    let sweep = threshold_sweep(&pairs, n_thresholds)?;
    write_text(&out_dir.join("sweep.csv"), &sweep_csv(&sweep))?;
    Ok(sweep)
}

fn write_prediction_analyses(
    open: &OpenDataset,
    config: &RunConfig,
    predictor: &PredictorImpl,
    gt_sweep: Option<&CategorySweep>,
    h: usize,
    w: usize,
    out_dir: &Path,
) -> Result<()> {
    // Predictions on the strided validation clips of every sequence.
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut segs = Vec::new();
    let collect_segs = gt_sweep.is_some();
    for (seq, split) in open.dataset.sequences.iter().zip(&open.splits) {
        for end in strided_validation_ends(split, config.eval_stride) {
            let p = predictor.predict(&open.dataset, seq, end, h, w)?;
            preds.push(p.max_normalized());
            gts.push((*open.dataset.map(seq, end)?).clone());
            if collect_segs {
                segs.push((*open.dataset.seg(seq, end)?).clone());
            }
        }
    }
    if preds.is_empty() {
        eprintln!("warning: no validation clips; prediction analyses skipped");
        return Ok(());
    }

    let (pred_mean, _) = sequence_mean_and_mode(&preds)?;
    let (gt_mean, _) = sequence_mean_and_mode(&gts)?;
    let overlay = deviation_overlay(&pred_mean, &gt_mean)?;
    write_ppm(&out_dir.join("overlay.ppm"), &overlay.to_rgb())?;

    if let Some(gt_sweep) = gt_sweep {
        let pairs: Vec<(&Tensor, &Tensor)> = preds.iter().zip(segs.iter()).collect();
        let pred_sweep = threshold_sweep(&pairs, config.n_thresholds)?;
        write_text(&out_dir.join("sweep_prediction.csv"), &sweep_csv(&pred_sweep))?;
        let tau = category_rank_agreement(gt_sweep, &pred_sweep)?;
        let csv = format!("kendall_tau\n{}\n", cell(tau));
        write_text(&out_dir.join("rank_agreement.csv"), &csv)?;
    }
    Ok(())
}
