//! Evaluation subcommand: per-clip CC/KL report with overall, per-sequence,
//! and hard-subset aggregates.

use crate::common::{cell, map_dims, open_dataset, strided_validation_ends, write_text, OpenDataset};
use crate::config::RunConfig;
use crate::common::PredictorImpl;
use crate::lock::DirLock;
use anyhow::{Context, Result};
use drivegaze_core::analysis::{select_hard_subsequences, HardSelection};
use drivegaze_core::metrics::{self, Aggregate, ClipScore, MetricReport};
use drivegaze_core::Tensor;
use std::collections::BTreeMap;
use std::fmt::Write as _;

pub fn run(config: &RunConfig) -> Result<()> {
    let _seed = config.seed()?;
    let out_dir = config.output_dir()?.clone();
    let _lock = DirLock::acquire(&out_dir)?;
    let open = open_dataset(config.dataset_root()?)?;
    let kind = config
        .predictor
        .context("eval requires --predictor model|gaussian|mean_gt")?;
    let predictor = PredictorImpl::build(kind, config, &open)?;
    let (h, w) = map_dims(&open.dataset)?;

    let mut report = MetricReport::default();
    for (seq, split) in open.dataset.sequences.iter().zip(&open.splits) {
        for end in strided_validation_ends(split, config.eval_stride) {
            let pred = predictor.predict(&open.dataset, seq, end, h, w)?;
            let gt = open.dataset.map(seq, end)?;
            report.push(ClipScore {
                sequence_id: seq.id.clone(),
                clip_end_frame: end,
                cc: metrics::cc(&pred, &gt)?,
                kl: metrics::kl(&gt, &pred)?,
            });
        }
    }

    let hard = hard_frame_ranges(&open)?;
    let is_hard = |s: &ClipScore| {
        hard.get(&s.sequence_id)
            .map(|ranges| {
                ranges
                    .iter()
                    .any(|&(a, b)| s.clip_end_frame >= a && s.clip_end_frame < b)
            })
            .unwrap_or(false)
    };

    let mut csv = String::new();
    csv.push_str("# kl = KL(ground_truth || prediction), epsilon 1e-7 per cell, sum-normalized\n");
    csv.push_str("# aggregate std is the population standard deviation\n");
    csv.push_str("# aggregate count rows: cc column = clips with defined CC, kl column = all clips\n");
    let _ = writeln!(csv, "# sigma_fraction={}", config.sigma_fraction);
    let _ = writeln!(csv, "# predictor={}", kind.as_str());
    csv.push_str("sequence_id,clip_end_frame,cc,kl\n");
    for row in &report.rows {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            row.sequence_id,
            row.clip_end_frame,
            cell(row.cc),
            cell(Some(row.kl))
        );
    }
    for id in report.sequence_ids() {
        let agg = report.aggregate_filtered(|r| r.sequence_id == id);
        push_aggregate(&mut csv, &id, &agg, &report, |r| r.sequence_id == id);
    }
    let all = report.aggregate();
    push_aggregate(&mut csv, "ALL", &all, &report, |_| true);
    let all_hard = report.aggregate_filtered(&is_hard);
    push_aggregate(&mut csv, "ALL_HARD", &all_hard, &report, &is_hard);

    let path = out_dir.join("report.csv");
    write_text(&path, &csv)?;
    println!(
        "wrote {} ({} clips, ALL cc mean {}, ALL_HARD cc mean {})",
        path.display(),
        all.count,
        cell(finite(all.cc_mean)),
        cell(finite(all_hard.cc_mean)),
    );
    Ok(())
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn push_aggregate(
    csv: &mut String,
    id: &str,
    agg: &Aggregate,
    report: &MetricReport,
    keep: impl Fn(&ClipScore) -> bool,
) {
    let defined = report
        .rows
        .iter()
        .filter(|r| keep(r) && r.cc.is_some())
        .count();
    let _ = writeln!(
        csv,
        "{},agg_mean,{},{}",
        id,
        cell(finite(agg.cc_mean)),
        cell(finite(agg.kl_mean))
    );
    let _ = writeln!(
        csv,
        "{},agg_std,{},{}",
        id,
        cell(finite(agg.cc_std)),
        cell(finite(agg.kl_std))
    );
    let _ = writeln!(csv, "{},agg_count,{},{}", id, defined, agg.count);
}

/// Hard sub-sequence frame ranges per sequence, mined from the ground-truth
/// maps over the whole sequence with clip-length windows.
pub fn hard_frame_ranges(open: &OpenDataset) -> Result<BTreeMap<String, Vec<(usize, usize)>>> {
    let mut out = BTreeMap::new();
    for seq in &open.dataset.sequences {
        let maps: Vec<Tensor> = (0..seq.len())
            .map(|i| open.dataset.map(seq, i).map(|t| (*t).clone()))
            .collect::<Result<_, _>>()?;
        match select_hard_subsequences(&maps, 16)? {
            HardSelection::Windows(wins) => {
                out.insert(seq.id.clone(), wins);
            }
            HardSelection::Unselectable => {
                eprintln!(
                    "warning: sequence {} has a constant mean map; hard mining skipped",
                    seq.id
                );
            }
        }
    }
    Ok(out)
}
