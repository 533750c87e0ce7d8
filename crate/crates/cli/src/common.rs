//! Shared plumbing for the subcommands: dataset access with splits,
//! predictor evaluation, and deterministic CSV formatting.

use crate::config::{Predictor, RunConfig};
use anyhow::{bail, Context, Result};
use drivegaze_core::data::{split_sequence, Dataset, SequenceRecord, SequenceSplit};
use drivegaze_core::metrics;
use drivegaze_core::model::{load_checkpoint, ModelParams};
use drivegaze_core::{ops, Tensor};
use std::path::Path;

pub struct OpenDataset {
    pub dataset: Dataset,
    pub splits: Vec<SequenceSplit>,
}

/// Open the dataset and split every sequence, printing any split warnings
/// to stderr.
pub fn open_dataset(root: &Path) -> Result<OpenDataset> {
    let dataset = Dataset::open(root)?;
    let mut splits = Vec::new();
    for seq in &dataset.sequences {
        let split = split_sequence(&seq.id, seq.len())?;
        if let Some(w) = &split.warning {
            eprintln!("warning: {}", w);
        }
        splits.push(split);
    }
    Ok(OpenDataset { dataset, splits })
}

pub fn map_dims(dataset: &Dataset) -> Result<(usize, usize)> {
    let seq = &dataset.sequences[0];
    let map = dataset.map(seq, 0)?;
    match map.shape() {
        [1, h, w] => Ok((*h, *w)),
        s => bail!("unexpected map shape {:?}", s),
    }
}

/// Every `stride`-th validation clip end per sequence.
pub fn strided_validation_ends(split: &SequenceSplit, stride: usize) -> Vec<usize> {
    split
        .validation_clip_ends
        .iter()
        .step_by(stride.max(1))
        .copied()
        .collect()
}

/// A per-clip prediction source at the dataset's native map resolution.
pub enum PredictorImpl {
    Model(Box<ModelParams>),
    Static(Tensor),
}

impl PredictorImpl {
    pub fn build(
        kind: Predictor,
        config: &RunConfig,
        open: &OpenDataset,
    ) -> Result<PredictorImpl> {
        let (h, w) = map_dims(&open.dataset)?;
        match kind {
            Predictor::Model => {
                let path = config
                    .checkpoint
                    .as_ref()
                    .context("predictor=model requires a checkpoint path")?;
                let (params, _) = load_checkpoint(path)?;
                Ok(PredictorImpl::Model(Box::new(params)))
            }
            Predictor::Gaussian => Ok(PredictorImpl::Static(
                metrics::gaussian_baseline(h, w, config.sigma_fraction)?,
            )),
            Predictor::MeanGt => {
                // Average of every attentional map outside validation ranges.
                let mut acc: Option<Tensor> = None;
                let mut count = 0usize;
                for (seq, split) in open.dataset.sequences.iter().zip(&open.splits) {
                    let (vs, ve) = split.validation_range;
                    for i in 0..seq.len() {
                        if i >= vs && i < ve {
                            continue;
                        }
                        let m = open.dataset.map(seq, i)?;
                        match &mut acc {
                            Some(a) => a.accumulate(&m),
                            slot => *slot = Some((*m).clone()),
                        }
                        count += 1;
                    }
                }
                let acc = acc.context("mean_gt baseline: no training maps")?;
                Ok(PredictorImpl::Static(acc.scale(1.0 / count as f64)))
            }
        }
    }

    /// Prediction for the clip ending at `end`, as a 1xHxW map at the
    /// native map resolution.
    pub fn predict(
        &self,
        dataset: &Dataset,
        seq: &SequenceRecord,
        end: usize,
        h: usize,
        w: usize,
    ) -> Result<Tensor> {
        match self {
            PredictorImpl::Static(map) => Ok(map.clone()),
            PredictorImpl::Model(params) => {
                let frames: Vec<Tensor> = (end + 1 - 16..=end)
                    .map(|i| dataset.frame(seq, i).map(|t| (*t).clone()))
                    .collect::<Result<_, _>>()?;
                let refined = params.predict(&frames)?;
                let native = ops::resize_bilinear(&refined, h, w)?;
                Ok(native)
            }
        }
    }
}

/// Fixed-precision float cell; empty for undefined values.
pub fn cell(v: Option<f64>) -> String {
    match v {
        Some(v) if v.is_finite() => format!("{:.6}", v),
        _ => String::new(),
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
