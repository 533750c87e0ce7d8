//! Saliency evaluation: Pearson CC, KL divergence, Kendall tau-b, and the
//! two center-bias baselines.

use crate::error::{Error, Result};
use crate::tensor::{shape_string, Tensor};

/// Epsilon added per cell before sum-normalizing maps for KL.
pub const KL_EPSILON: f64 = 1e-7;

/// Pearson correlation over flattened pixels, population variances.
/// `None` when either map is constant (the statistic is undefined there;
/// a silent zero would corrupt aggregates).
pub fn cc(prediction: &Tensor, target: &Tensor) -> Result<Option<f64>> {
    if prediction.shape() != target.shape() {
        return Err(Error::shape(
            "cc",
            shape_string(prediction.shape()),
            shape_string(target.shape()),
        ));
    }
    let n = prediction.len() as f64;
    let (p, g) = (prediction.data(), target.data());
    // Exact constancy check: the variance of a constant map can come out as
    // rounding residue instead of zero, which would make CC a noise ratio.
    let constant = |d: &[f64]| d.windows(2).all(|w| w[0] == w[1]);
    if constant(p) || constant(g) {
        return Ok(None);
    }
    let mp = p.iter().sum::<f64>() / n;
    let mg = g.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut vg = 0.0;
    for (&a, &b) in p.iter().zip(g) {
        cov += (a - mp) * (b - mg);
        vp += (a - mp) * (a - mp);
        vg += (b - mg) * (b - mg);
    }
    if vp == 0.0 || vg == 0.0 {
        return Ok(None);
    }
    Ok(Some(cov / (vp.sqrt() * vg.sqrt())))
}

/// KL(ground-truth || prediction) after per-cell epsilon regularization and
/// sum normalization. Lower is better.
pub fn kl(target: &Tensor, prediction: &Tensor) -> Result<f64> {
    if prediction.shape() != target.shape() {
        return Err(Error::shape(
            "kl",
            shape_string(target.shape()),
            shape_string(prediction.shape()),
        ));
    }
    let norm = |t: &Tensor| -> Vec<f64> {
        let total: f64 = t.data().iter().map(|v| v + KL_EPSILON).sum();
        t.data().iter().map(|v| (v + KL_EPSILON) / total).collect()
    };
    let g = norm(target);
    let p = norm(prediction);
    Ok(g.iter()
        .zip(&p)
        .map(|(&gi, &pi)| gi * (gi / pi).ln())
        .sum())
}

/// Tie-corrected Kendall rank coefficient (tau-b). `None` when either series
/// is all ties.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "kendall_tau",
            format!("{}", a.len()),
            format!("{}", b.len()),
        ));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "kendall_tau: need at least 2 elements".into(),
        ));
    }
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    let mut ties_a = 0i64;
    let mut ties_b = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            let da = a[i] - a[j];
            let db = b[i] - b[j];
            if da == 0.0 && db == 0.0 {
                continue;
            } else if da == 0.0 {
                ties_a += 1;
            } else if db == 0.0 {
                ties_b += 1;
            } else if (da > 0.0) == (db > 0.0) {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let denom_a = n0 - count_tie_pairs(a);
    let denom_b = n0 - count_tie_pairs(b);
    if denom_a == 0 || denom_b == 0 {
        return Ok(None);
    }
    let _ = (ties_a, ties_b);
    Ok(Some(
        (concordant - discordant) as f64 / ((denom_a as f64) * (denom_b as f64)).sqrt(),
    ))
}

fn count_tie_pairs(series: &[f64]) -> i64 {
    let mut sorted: Vec<f64> = series.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut pairs = 0i64;
    let mut run = 1i64;
    for i in 1..sorted.len() {
        if sorted[i] == sorted[i - 1] {
            run += 1;
        } else {
            pairs += run * (run - 1) / 2;
            run = 1;
        }
    }
    pairs + run * (run - 1) / 2
}

/// Centered Gaussian stretched to the map's aspect ratio, peak-normalized.
pub fn gaussian_baseline(h: usize, w: usize, sigma_fraction: f64) -> Result<Tensor> {
    if sigma_fraction <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "gaussian_baseline: sigma_fraction {} must be positive",
            sigma_fraction
        )));
    }
    let sy = sigma_fraction * h as f64;
    let sx = sigma_fraction * w as f64;
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            data.push((-(dy * dy / (2.0 * sy * sy) + dx * dx / (2.0 * sx * sx))).exp());
        }
    }
    Ok(Tensor::from_vec(&[1, h, w], data)?.max_normalized())
}

/// Pixelwise mean of the training ground-truth maps.
pub fn mean_gt_baseline(maps: &[Tensor]) -> Result<Tensor> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("mean_gt_baseline: empty map set".into()))?;
    let mut acc = Tensor::zeros(first.shape());
    for m in maps {
        if m.shape() != first.shape() {
            return Err(Error::shape(
                "mean_gt_baseline",
                shape_string(first.shape()),
                shape_string(m.shape()),
            ));
        }
        acc.accumulate(m);
    }
    Ok(acc.scale(1.0 / maps.len() as f64))
}

/// One evaluated clip.
#[derive(Clone, Debug)]
pub struct ClipScore {
    pub sequence_id: String,
    pub clip_end_frame: usize,
    pub cc: Option<f64>,
    pub kl: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Aggregate {
    pub count: usize,
    pub cc_mean: f64,
    pub cc_std: f64,
    pub kl_mean: f64,
    pub kl_std: f64,
}

/// Per-clip scores plus aggregates (population standard deviation).
#[derive(Clone, Debug, Default)]
pub struct MetricReport {
    pub rows: Vec<ClipScore>,
}

impl MetricReport {
    pub fn push(&mut self, score: ClipScore) {
        self.rows.push(score);
    }

    pub fn aggregate(&self) -> Aggregate {
        aggregate_scores(self.rows.iter())
    }

    pub fn aggregate_filtered<'a>(
        &'a self,
        keep: impl Fn(&ClipScore) -> bool + 'a,
    ) -> Aggregate {
        aggregate_scores(self.rows.iter().filter(|r| keep(r)))
    }

    pub fn sequence_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.rows.iter().map(|r| r.sequence_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

fn aggregate_scores<'a>(rows: impl Iterator<Item = &'a ClipScore>) -> Aggregate {
    let rows: Vec<&ClipScore> = rows.collect();
    let count = rows.len();
    if count == 0 {
        return Aggregate::default();
    }
    // Clips with undefined CC are excluded from the CC moments but still
    // counted for KL.
    let ccs: Vec<f64> = rows.iter().filter_map(|r| r.cc).collect();
    let kls: Vec<f64> = rows.iter().map(|r| r.kl).collect();
    let moments = |xs: &[f64]| -> (f64, f64) {
        if xs.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (cc_mean, cc_std) = moments(&ccs);
    let (kl_mean, kl_std) = moments(&kls);
    Aggregate {
        count,
        cc_mean,
        cc_std,
        kl_mean,
        kl_std,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cc_of_self_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::random(&[1, 8, 8], 0.0, 1.0, &mut rng);
        let r = cc(&x, &x).unwrap().unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cc_affine_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::random(&[1, 8, 8], 0.0, 1.0, &mut rng);
        let y = x.map(|v| 3.5 * v + 0.7);
        let r = cc(&x, &y).unwrap().unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cc_constant_map_is_undefined() {
        let x = Tensor::full(&[4, 4], 0.3);
        let y = Tensor::from_vec(&[4, 4], (0..16).map(|i| i as f64).collect()).unwrap();
        assert!(cc(&x, &y).unwrap().is_none());
        assert!(cc(&y, &x).unwrap().is_none());
    }

    #[test]
    fn kl_of_self_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::random(&[1, 6, 6], 0.0, 1.0, &mut rng);
        assert!(kl(&x, &x).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_concentrated_vs_uniform_is_log_n() {
        // Target on one cell, uniform prediction over N cells: KL ~ ln N.
        let n = 64;
        let mut g = vec![0.0; n];
        g[10] = 1.0;
        let target = Tensor::from_vec(&[8, 8], g).unwrap();
        let pred = Tensor::full(&[8, 8], 1.0 / n as f64);
        let v = kl(&target, &pred).unwrap();
        assert!((v - (n as f64).ln()).abs() < 0.01, "kl {} vs ln N {}", v, (n as f64).ln());
    }

    #[test]
    fn kendall_identical_and_reversed() {
        let a: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..10).rev().map(|i| i as f64).collect();
        assert_eq!(kendall_tau(&a, &a).unwrap(), Some(1.0));
        assert_eq!(kendall_tau(&a, &b).unwrap(), Some(-1.0));
    }

    #[test]
    fn kendall_all_ties_undefined() {
        let a = vec![1.0; 5];
        let b: Vec<f64> = (0..5).map(|i| i as f64).collect();
        assert_eq!(kendall_tau(&a, &b).unwrap(), None);
    }

    // Independent O(n^2) oracle with explicit tie-pair counting.
    fn tau_oracle(a: &[f64], b: &[f64]) -> Option<f64> {
        let n = a.len();
        let mut num = 0.0;
        let (mut pairs_a, mut pairs_b): (f64, f64) = (0.0, 0.0);
        for i in 0..n {
            for j in (i + 1)..n {
                // f64::signum maps 0.0 to 1.0, so compare explicitly.
                let sign = |d: f64| {
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                let sa = sign(a[i] - a[j]);
                let sb = sign(b[i] - b[j]);
                num += sa * sb;
                pairs_a += if sa != 0.0 { 1.0 } else { 0.0 };
                pairs_b += if sb != 0.0 { 1.0 } else { 0.0 };
            }
        }
        if pairs_a == 0.0 || pairs_b == 0.0 {
            return None;
        }
        Some(num / (pairs_a * pairs_b).sqrt())
    }

    #[test]
    fn kendall_matches_pair_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let n = rng.gen_range(2..12);
            // Quantized values so ties actually occur.
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64).collect();
            let got = kendall_tau(&a, &b).unwrap();
            let want = tau_oracle(&a, &b);
            match (got, want) {
                (Some(g), Some(w)) => assert!((g - w).abs() < 1e-12),
                (None, None) => {}
                other => panic!("mismatch: {:?}", other),
            }
        }
    }

    #[test]
    fn kendall_symmetry_and_negation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..10).map(|_| rng.gen::<f64>()).collect();
        let b: Vec<f64> = (0..10).map(|_| rng.gen::<f64>()).collect();
        let ab = kendall_tau(&a, &b).unwrap().unwrap();
        let ba = kendall_tau(&b, &a).unwrap().unwrap();
        assert!((ab - ba).abs() < 1e-12);
        let neg_a: Vec<f64> = a.iter().map(|x| -x).collect();
        let nab = kendall_tau(&neg_a, &b).unwrap().unwrap();
        assert!((nab + ab).abs() < 1e-12);
    }

    #[test]
    fn gaussian_baseline_center_and_symmetry() {
        let g = gaussian_baseline(24, 32, 0.25).unwrap();
        assert_eq!(g.shape(), [1, 24, 32]);
        assert!((g.max_value() - 1.0).abs() < 1e-12);
        let d = g.data();
        for y in 0..24 {
            for x in 0..32 {
                assert!((d[y * 32 + x] - d[y * 32 + (31 - x)]).abs() < 1e-12);
            }
        }
        // Stretched to the aspect ratio: equal normalized offsets give equal
        // values, so the iso-contours have axis ratio W:H.
        let v_y = d[(12 + 6) * 32 + 16]; // dy = 6 = H/4 (about; centers are fractional)
        let v_x = d[12 * 32 + 16 + 8]; // dx = 8 = W/4
        assert!((v_y / v_x - 1.0).abs() < 0.2);
    }

    #[test]
    fn mean_gt_baseline_small_cases() {
        let a = Tensor::full(&[1, 2, 2], 0.2);
        let b = Tensor::full(&[1, 2, 2], 0.8);
        assert_eq!(mean_gt_baseline(&[a.clone()]).unwrap(), a);
        let mid = mean_gt_baseline(&[a, b]).unwrap();
        assert!(mid.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
        assert!(mean_gt_baseline(&[]).is_err());
    }

    #[test]
    fn mean_gt_baseline_matches_accumulation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let maps: Vec<Tensor> = (0..50)
            .map(|_| Tensor::random(&[1, 5, 7], 0.0, 1.0, &mut rng))
            .collect();
        let mean = mean_gt_baseline(&maps).unwrap();
        for i in 0..mean.len() {
            let want: f64 = maps.iter().map(|m| m.data()[i]).sum::<f64>() / 50.0;
            assert!((mean.data()[i] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn aggregate_population_std() {
        let mut report = MetricReport::default();
        for (i, v) in [0.0, 1.0].iter().enumerate() {
            report.push(ClipScore {
                sequence_id: "s".into(),
                clip_end_frame: i,
                cc: Some(*v),
                kl: *v,
            });
        }
        let agg = report.aggregate();
        assert_eq!(agg.count, 2);
        assert!((agg.cc_mean - 0.5).abs() < 1e-12);
        assert!((agg.cc_std - 0.5).abs() < 1e-12, "population std of [0,1] is 0.5");
    }
}
