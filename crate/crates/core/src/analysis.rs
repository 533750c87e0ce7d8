//! Empirical analyses over attentional maps: speed-bucketed means, sequence
//! mean/mode, semantic threshold sweeps, hard-subsequence mining and
//! precision/recall deviation overlays.

use crate::data::Landscape;
use crate::error::{Error, Result};
use crate::metrics::{cc, kendall_tau};
use crate::tensor::{shape_string, Tensor};

pub const CATEGORY_COUNT: usize = 10;
pub const CATEGORY_NAMES: [&str; CATEGORY_COUNT] = [
    "road",
    "sidewalk",
    "buildings",
    "traffic_lights_signs",
    "trees",
    "road_limits",
    "sky",
    "people",
    "vehicles",
    "cycles",
];

pub const CAT_ROAD: u8 = 0;
pub const CAT_SIDEWALK: u8 = 1;
pub const CAT_BUILDINGS: u8 = 2;
pub const CAT_SIGNS: u8 = 3;
pub const CAT_TREES: u8 = 4;
pub const CAT_ROAD_LIMITS: u8 = 5;
pub const CAT_SKY: u8 = 6;
pub const CAT_PEOPLE: u8 = 7;
pub const CAT_VEHICLES: u8 = 8;
pub const CAT_CYCLES: u8 = 9;

/// Half-open speed bucket edges in km/h; the last bucket is unbounded.
pub const SPEED_BUCKET_EDGES: [(f64, f64); 5] = [
    (0.0, 10.0),
    (10.0, 30.0),
    (30.0, 50.0),
    (50.0, 70.0),
    (70.0, f64::INFINITY),
];

pub fn speed_bucket_index(speed_kmh: f64) -> usize {
    SPEED_BUCKET_EDGES
        .iter()
        .position(|(lo, hi)| speed_kmh >= *lo && speed_kmh < *hi)
        .expect("nonnegative speed lands in exactly one bucket")
}

#[derive(Clone, Debug)]
pub struct SpeedBucket {
    pub range: (f64, f64),
    pub mean_map: Option<Tensor>,
    pub count: usize,
    /// Frame counts per landscape, ordered as [`Landscape::ALL`].
    pub landscape_counts: [usize; 3],
}

#[derive(Clone, Debug)]
pub struct SpeedBucketSummary {
    pub buckets: [SpeedBucket; 5],
}

/// Pixelwise mean map per speed bucket, with landscape composition.
/// Empty buckets are flagged (mean_map None), not an error.
pub fn speed_bucket_maps<'a>(
    items: impl Iterator<Item = (&'a Tensor, f64, Landscape)>,
) -> Result<SpeedBucketSummary> {
    let mut sums: [Option<Tensor>; 5] = Default::default();
    let mut counts = [0usize; 5];
    let mut landscapes = [[0usize; 3]; 5];
    for (map, speed, landscape) in items {
        if speed < 0.0 {
            return Err(Error::InvalidArgument(format!("negative speed {}", speed)));
        }
        let b = speed_bucket_index(speed);
        match &mut sums[b] {
            Some(acc) => {
                if acc.shape() != map.shape() {
                    return Err(Error::shape(
                        "speed_bucket_maps",
                        shape_string(acc.shape()),
                        shape_string(map.shape()),
                    ));
                }
                acc.accumulate(map);
            }
            slot => *slot = Some(map.clone()),
        }
        counts[b] += 1;
        let li = Landscape::ALL.iter().position(|l| *l == landscape).unwrap();
        landscapes[b][li] += 1;
    }
    let buckets = std::array::from_fn(|b| SpeedBucket {
        range: SPEED_BUCKET_EDGES[b],
        mean_map: sums[b].as_ref().map(|s| s.scale(1.0 / counts[b] as f64)),
        count: counts[b],
        landscape_counts: landscapes[b],
    });
    Ok(SpeedBucketSummary { buckets })
}

/// Second spatial moment (mean squared distance from the probability-weighted
/// centroid, in pixels squared) of a nonnegative map.
pub fn spatial_spread(map: &Tensor) -> Result<f64> {
    let (h, w) = map_dims(map)?;
    let total = map.sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("spatial_spread: map sums to zero".into()));
    }
    let d = map.data();
    let (mut cy, mut cx) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v = d[y * w + x];
            cy += v * y as f64;
            cx += v * x as f64;
        }
    }
    cy /= total;
    cx /= total;
    let mut m2 = 0.0;
    for y in 0..h {
        for x in 0..w {
            let v = d[y * w + x];
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            m2 += v * (dy * dy + dx * dx);
        }
    }
    Ok(m2 / total)
}

/// Pixelwise mean and its argmax ("fixation mode"), ties broken by smallest
/// (y, x).
pub fn sequence_mean_and_mode(maps: &[Tensor]) -> Result<(Tensor, (usize, usize))> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("sequence_mean_and_mode: empty".into()))?;
    let mut acc = Tensor::zeros(first.shape());
    for m in maps {
        if m.shape() != first.shape() {
            return Err(Error::shape(
                "sequence_mean_and_mode",
                shape_string(first.shape()),
                shape_string(m.shape()),
            ));
        }
        acc.accumulate(m);
    }
    let mean = acc.scale(1.0 / maps.len() as f64);
    let (h, w) = map_dims(&mean)?;
    let d = mean.data();
    let mut best = (0usize, 0usize);
    let mut best_v = f64::NEG_INFINITY;
    for y in 0..h {
        for x in 0..w {
            let v = d[y * w + x];
            if v > best_v {
                best_v = v;
                best = (y, x);
            }
        }
    }
    Ok((mean, best))
}

#[derive(Clone, Debug)]
pub struct CategorySweep {
    /// Thresholds k/n for k = 0..n-1.
    pub thresholds: Vec<f64>,
    /// Per threshold: proportion of mask pixels per category; None when the
    /// mask was empty at that threshold.
    pub proportions: Vec<Option<[f64; CATEGORY_COUNT]>>,
    /// Least-squares trend slope per category over nonempty thresholds.
    pub slopes: [f64; CATEGORY_COUNT],
}

/// Binarize each map at linearly spaced thresholds and measure which
/// segmentation categories fall inside the mask.
pub fn threshold_sweep(
    pairs: &[(&Tensor, &Tensor)],
    n_thresholds: usize,
) -> Result<CategorySweep> {
    if n_thresholds < 2 {
        return Err(Error::InvalidArgument(
            "threshold_sweep: need at least 2 thresholds".into(),
        ));
    }
    let thresholds: Vec<f64> = (0..n_thresholds)
        .map(|k| k as f64 / n_thresholds as f64)
        .collect();
    let mut counts = vec![[0u64; CATEGORY_COUNT]; n_thresholds];
    for (map, seg) in pairs {
        let (h, w) = map_dims(map)?;
        if seg.shape() != [h, w] {
            return Err(Error::shape(
                "threshold_sweep",
                format!("{}x{}", h, w),
                shape_string(seg.shape()),
            ));
        }
        let md = map.data();
        let sd = seg.data();
        for i in 0..h * w {
            let cat = sd[i] as usize;
            if cat >= CATEGORY_COUNT {
                return Err(Error::InvalidArgument(format!(
                    "threshold_sweep: segmentation id {} out of range",
                    sd[i]
                )));
            }
            for (k, &t) in thresholds.iter().enumerate() {
                if md[i] >= t {
                    counts[k][cat] += 1;
                } else {
                    break; // thresholds ascend, so the mask only shrinks
                }
            }
        }
    }
    let proportions: Vec<Option<[f64; CATEGORY_COUNT]>> = counts
        .iter()
        .map(|row| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                None
            } else {
                Some(std::array::from_fn(|c| row[c] as f64 / total as f64))
            }
        })
        .collect();
    let slopes = std::array::from_fn(|c| {
        let points: Vec<(f64, f64)> = thresholds
            .iter()
            .zip(&proportions)
            .filter_map(|(&t, p)| p.map(|p| (t, p[c])))
            .collect();
        least_squares_slope(&points)
    });
    Ok(CategorySweep {
        thresholds,
        proportions,
        slopes,
    })
}

fn least_squares_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    if points.len() < 2 {
        return 0.0;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let num: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = points.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub const HARD_CC_THRESHOLD: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub enum HardSelection {
    /// The sequence-mean map is constant, so CC against it is undefined.
    Unselectable,
    /// Merged half-open frame ranges whose windows correlate poorly
    /// (mean CC < 0.3) with the sequence-mean map.
    Windows(Vec<(usize, usize)>),
}

/// Mine sub-sequences that poorly correlate with the sequence-mean map.
/// Windows are consecutive chunks of `window_len` frames; adjacent selected
/// windows merge.
pub fn select_hard_subsequences(maps: &[Tensor], window_len: usize) -> Result<HardSelection> {
    if window_len == 0 {
        return Err(Error::InvalidArgument("window_len must be at least 1".into()));
    }
    let (mean, _) = sequence_mean_and_mode(maps)?;
    if mean.max_value() == mean.min_value() {
        return Ok(HardSelection::Unselectable);
    }
    let mut ranges: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    while start < maps.len() {
        let end = (start + window_len).min(maps.len());
        let ccs: Vec<f64> = maps[start..end]
            .iter()
            .filter_map(|m| cc(m, &mean).ok().flatten())
            .collect();
        let selected = !ccs.is_empty()
            && (ccs.iter().sum::<f64>() / ccs.len() as f64) < HARD_CC_THRESHOLD;
        if selected {
            match ranges.last_mut() {
                Some(last) if last.1 == start => last.1 = end,
                _ => ranges.push((start, end)),
            }
        }
        start = end;
    }
    Ok(HardSelection::Windows(ranges))
}

pub const DEVIATION_THRESHOLD: f64 = 0.10;

#[derive(Clone, Debug)]
pub struct DeviationOverlay {
    pub height: usize,
    pub width: usize,
    /// Prediction exceeds ground truth by more than 10% of range.
    pub precision_errors: Vec<bool>,
    /// Ground truth exceeds prediction by more than 10% of range.
    pub recall_errors: Vec<bool>,
}

/// Compare peak-normalized mean maps; the 10% threshold is scale-free.
pub fn deviation_overlay(prediction: &Tensor, ground_truth: &Tensor) -> Result<DeviationOverlay> {
    if prediction.shape() != ground_truth.shape() {
        return Err(Error::shape(
            "deviation_overlay",
            shape_string(prediction.shape()),
            shape_string(ground_truth.shape()),
        ));
    }
    let (h, w) = map_dims(prediction)?;
    let p = prediction.max_normalized();
    let g = ground_truth.max_normalized();
    let mut precision = vec![false; h * w];
    let mut recall = vec![false; h * w];
    for i in 0..h * w {
        let d = p.data()[i] - g.data()[i];
        if d > DEVIATION_THRESHOLD {
            precision[i] = true;
        } else if -d > DEVIATION_THRESHOLD {
            recall[i] = true;
        }
    }
    Ok(DeviationOverlay {
        height: h,
        width: w,
        precision_errors: precision,
        recall_errors: recall,
    })
}

impl DeviationOverlay {
    /// Render as RGB: precision errors green, recall errors red.
    pub fn to_rgb(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0; 3 * h * w];
        for i in 0..h * w {
            if self.precision_errors[i] {
                data[h * w + i] = 1.0; // green channel
            }
            if self.recall_errors[i] {
                data[i] = 1.0; // red channel
            }
        }
        Tensor::from_vec(&[3, h, w], data).unwrap()
    }
}

/// Average each category's proportion across thresholds for both sweeps and
/// rank-correlate the two 10-element series.
pub fn category_rank_agreement(
    gt: &CategorySweep,
    prediction: &CategorySweep,
) -> Result<Option<f64>> {
    let series = |s: &CategorySweep| -> [f64; CATEGORY_COUNT] {
        std::array::from_fn(|c| {
            let vals: Vec<f64> = s.proportions.iter().filter_map(|p| p.map(|p| p[c])).collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        })
    };
    kendall_tau(&series(gt), &series(prediction))
}

fn map_dims(map: &Tensor) -> Result<(usize, usize)> {
    match map.shape() {
        [h, w] => Ok((*h, *w)),
        [1, h, w] => Ok((*h, *w)),
        s => Err(Error::shape("map", "HxW or 1xHxW", shape_string(s))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blob(h: usize, w: usize, cy: f64, cx: f64, sigma: f64) -> Tensor {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                data.push((-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp());
            }
        }
        Tensor::from_vec(&[1, h, w], data).unwrap()
    }

    #[test]
    fn bucket_membership_is_a_partition() {
        for speed in [0.0, 9.999, 10.0, 29.9, 30.0, 49.0, 50.0, 69.9, 70.0, 250.0] {
            let b = speed_bucket_index(speed);
            let hits = SPEED_BUCKET_EDGES
                .iter()
                .filter(|(lo, hi)| speed >= *lo && speed < *hi)
                .count();
            assert_eq!(hits, 1);
            assert!(b < 5);
        }
        assert_eq!(speed_bucket_index(10.0), 1);
        assert_eq!(speed_bucket_index(70.0), 4);
    }

    #[test]
    fn single_bucket_population_and_histograms() {
        let m = blob(8, 8, 4.0, 4.0, 2.0);
        let items = vec![
            (&m, 5.0, Landscape::Downtown),
            (&m, 6.0, Landscape::Highway),
            (&m, 7.0, Landscape::Downtown),
        ];
        let s = speed_bucket_maps(items.into_iter()).unwrap();
        assert_eq!(s.buckets[0].count, 3);
        assert_eq!(s.buckets[0].landscape_counts, [2, 0, 1]);
        assert_eq!(
            s.buckets[0].landscape_counts.iter().sum::<usize>(),
            s.buckets[0].count
        );
        for b in &s.buckets[1..] {
            assert_eq!(b.count, 0);
            assert!(b.mean_map.is_none());
        }
    }

    #[test]
    fn spread_reflects_sigma() {
        let narrow = blob(32, 32, 16.0, 16.0, 2.0);
        let wide = blob(32, 32, 16.0, 16.0, 6.0);
        assert!(spatial_spread(&narrow).unwrap() < spatial_spread(&wide).unwrap());
    }

    #[test]
    fn mode_is_argmax_with_lexicographic_ties() {
        let m = blob(16, 16, 5.0, 11.0, 2.0);
        let (_, mode) = sequence_mean_and_mode(std::slice::from_ref(&m)).unwrap();
        assert_eq!(mode, (5, 11));

        let mut tied = Tensor::zeros(&[1, 4, 4]);
        tied.data_mut()[1 * 4 + 2] = 1.0;
        tied.data_mut()[3 * 4 + 0] = 1.0;
        let (_, mode) = sequence_mean_and_mode(&[tied]).unwrap();
        assert_eq!(mode, (1, 2));
    }

    #[test]
    fn sweep_single_category_and_global_frequencies() {
        let map = blob(8, 8, 4.0, 4.0, 2.0);
        let seg_all_road = Tensor::zeros(&[8, 8]);
        let sweep = threshold_sweep(&[(&map, &seg_all_road)], 10).unwrap();
        for p in sweep.proportions.iter().flatten() {
            assert!((p[0] - 1.0).abs() < 1e-12);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        // threshold 0 covers every pixel: proportions equal label frequencies
        let mut seg = Tensor::zeros(&[8, 8]);
        for i in 0..32 {
            seg.data_mut()[i] = CAT_SKY as f64;
        }
        let sweep = threshold_sweep(&[(&map, &seg)], 10).unwrap();
        let p0 = sweep.proportions[0].unwrap();
        assert!((p0[CAT_SKY as usize] - 0.5).abs() < 1e-12);
        assert!((p0[CAT_ROAD as usize] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sweep_monotonic_rescaling_invariance() {
        // Applying a strictly monotonic rescale to the map while rescaling
        // the thresholds identically leaves the mask, and so the
        // proportions, unchanged. Check with the map squared (monotone on
        // [0,1]) against squared thresholds.
        let map = blob(12, 12, 6.0, 6.0, 3.0);
        let mut seg = Tensor::zeros(&[12, 12]);
        for i in 0..60 {
            seg.data_mut()[i] = CAT_TREES as f64;
        }
        let n = 8;
        let base = threshold_sweep(&[(&map, &seg)], n).unwrap();
        let squared = map.map(|v| v * v);
        // masks at t^2 on the squared map equal masks at t on the original
        for (k, t) in base.thresholds.iter().enumerate() {
            let t2 = t * t;
            let mask_a: Vec<bool> = map.data().iter().map(|&v| v >= *t).collect();
            let mask_b: Vec<bool> = squared.data().iter().map(|&v| v >= t2).collect();
            assert_eq!(mask_a, mask_b, "threshold {}", k);
        }
    }

    #[test]
    fn hard_selection_identical_maps_none() {
        let m = blob(8, 8, 4.0, 4.0, 2.0);
        let maps = vec![m.clone(); 64];
        assert_eq!(
            select_hard_subsequences(&maps, 16).unwrap(),
            HardSelection::Windows(vec![])
        );
    }

    #[test]
    fn hard_selection_finds_planted_outliers_and_merges() {
        let normal = blob(16, 16, 8.0, 8.0, 3.0);
        let outlier = blob(16, 16, 2.0, 14.0, 1.0);
        let mut maps = vec![normal.clone(); 96];
        for m in maps.iter_mut().skip(32).take(32) {
            *m = outlier.clone();
        }
        match select_hard_subsequences(&maps, 16).unwrap() {
            HardSelection::Windows(w) => assert_eq!(w, vec![(32, 64)]),
            other => panic!("{:?}", other),
        }
    }

    #[test]
    fn hard_selection_constant_mean_unselectable() {
        let maps = vec![Tensor::full(&[1, 8, 8], 0.5); 4];
        assert_eq!(
            select_hard_subsequences(&maps, 2).unwrap(),
            HardSelection::Unselectable
        );
    }

    #[test]
    fn hard_selection_invariant_to_max_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let maps: Vec<Tensor> = (0..64)
            .map(|i| {
                if (16..32).contains(&i) {
                    blob(12, 12, 1.0, 1.0, 1.0)
                } else {
                    let jitter = rng.gen_range(-0.4..0.4);
                    blob(12, 12, 6.0 + jitter, 6.0 + jitter, 3.0)
                }
            })
            .collect();
        let scaled: Vec<Tensor> = maps.iter().map(|m| m.max_normalized().scale(1.0)).collect();
        assert_eq!(
            select_hard_subsequences(&maps, 16).unwrap(),
            select_hard_subsequences(&scaled, 16).unwrap()
        );
    }

    #[test]
    fn overlay_identical_empty_and_swap_symmetry() {
        let g = blob(10, 10, 5.0, 5.0, 2.0);
        let o = deviation_overlay(&g, &g).unwrap();
        assert!(o.precision_errors.iter().all(|&b| !b));
        assert!(o.recall_errors.iter().all(|&b| !b));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = Tensor::random(&[1, 10, 10], 0.0, 1.0, &mut rng);
        let fwd = deviation_overlay(&p, &g).unwrap();
        let rev = deviation_overlay(&g, &p).unwrap();
        assert_eq!(fwd.precision_errors, rev.recall_errors);
        assert_eq!(fwd.recall_errors, rev.precision_errors);
        // disjoint sets
        for i in 0..100 {
            assert!(!(fwd.precision_errors[i] && fwd.recall_errors[i]));
        }
    }

    #[test]
    fn overlay_uniform_offset() {
        let g = blob(10, 10, 5.0, 5.0, 3.0);
        let p = g.map(|v| (v + 0.2).min(1.0));
        let o = deviation_overlay(&p, &g).unwrap();
        assert!(o.recall_errors.iter().all(|&b| !b));
        assert!(o.precision_errors.iter().any(|&b| b));
    }

    #[test]
    fn overlay_matches_pixel_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Tensor::random(&[1, 9, 7], 0.0, 1.0, &mut rng);
        let g = Tensor::random(&[1, 9, 7], 0.0, 1.0, &mut rng);
        let o = deviation_overlay(&p, &g).unwrap();
        let pn = p.max_normalized();
        let gn = g.max_normalized();
        for i in 0..63 {
            assert_eq!(o.precision_errors[i], pn.data()[i] - gn.data()[i] > 0.10);
            assert_eq!(o.recall_errors[i], gn.data()[i] - pn.data()[i] > 0.10);
        }
    }

    #[test]
    fn rank_agreement_identical_sweeps() {
        let map = blob(8, 8, 4.0, 4.0, 2.0);
        let mut seg = Tensor::zeros(&[8, 8]);
        for (i, v) in seg.data_mut().iter_mut().enumerate() {
            *v = (i % CATEGORY_COUNT) as f64;
        }
        let sweep = threshold_sweep(&[(&map, &seg)], 10).unwrap();
        assert_eq!(category_rank_agreement(&sweep, &sweep).unwrap(), Some(1.0));
    }
}
