//! Procedural driving-scene generator with a planted gaze policy.
//!
//! Each sequence gets a road trapezoid converging to a per-sequence vanishing
//! point, landscape-dependent scenery, a lead vehicle sitting on the
//! vanishing point, and a ground-truth map built as a Gaussian on the
//! vanishing point whose spread shrinks as speed grows. Planted "event"
//! segments (10% of frames, aligned to 16-frame windows) move the gaze onto
//! a passing vehicle away from the vanishing point, giving the
//! hard-subsequence selector a known target.

use crate::analysis::{CATEGORY_NAMES, CAT_BUILDINGS, CAT_CYCLES, CAT_PEOPLE, CAT_ROAD,
    CAT_ROAD_LIMITS, CAT_SIDEWALK, CAT_SIGNS, CAT_SKY, CAT_TREES, CAT_VEHICLES};
use crate::data::{write_meta_csv, FrameRecord, Landscape, SequenceRecord};
use crate::error::{Error, Result};
use crate::io::{write_tensor, DType};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub sequences: usize,
    pub frames_per_sequence: usize,
    pub width: usize,
    pub height: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sequences: 6,
            frames_per_sequence: 480,
            width: 96,
            height: 64,
        }
    }
}

/// What the generator planted, for verification against analysis output.
#[derive(Clone, Debug)]
pub struct SequenceTruth {
    pub id: String,
    pub landscape: Landscape,
    /// (y, x) in pixels.
    pub vanishing_point: (f64, f64),
    /// Half-open frame ranges with the gaze moved onto the event vehicle.
    pub event_ranges: Vec<(usize, usize)>,
}

/// Speed profile block length; five blocks cycle through the five speed
/// buckets so every bucket is populated.
const SPEED_BLOCK: usize = 32;
const SPEED_CYCLE: usize = SPEED_BLOCK * 5;
const BUCKET_SPEEDS: [f64; 5] = [5.0, 20.0, 40.0, 60.0, 80.0];
pub const EVENT_LEN: usize = 16;

/// Gaussian spread as a fraction of each image dimension; strictly
/// decreasing in speed (gaze converges to the vanishing point when fast).
pub fn sigma_fraction_for_speed(speed_kmh: f64) -> f64 {
    0.05 + 0.20 * (-speed_kmh / 25.0).exp()
}

const EVENT_SIGMA_FRACTION: f64 = 0.05;

/// Generate the dataset under `root` (one directory per sequence plus a
/// root manifest.csv). Returns the planted truth per sequence.
pub fn generate(config: &SynthConfig, seed: u64, root: &Path) -> Result<Vec<SequenceTruth>> {
    if config.width < 32 || config.height < 32 {
        return Err(Error::InvalidArgument(
            "synth: resolution must be at least 32x32".into(),
        ));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root.display().to_string(), e))?;
    let mut truths = Vec::new();
    let mut manifest = String::from("sequence_id,landscape,frames,height,width\n");
    for si in 0..config.sequences {
        let truth = generate_sequence(config, seed, si, root)?;
        manifest.push_str(&format!(
            "{},{},{},{},{}\n",
            truth.id,
            truth.landscape.as_str(),
            config.frames_per_sequence,
            config.height,
            config.width
        ));
        truths.push(truth);
    }
    let mpath = root.join("manifest.csv");
    fs::write(&mpath, manifest).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    Ok(truths)
}

fn generate_sequence(
    config: &SynthConfig,
    seed: u64,
    seq_index: usize,
    root: &Path,
) -> Result<SequenceTruth> {
    let id = format!("seq{:02}", seq_index);
    let landscape = Landscape::ALL[seq_index % 3];
    let (w, h) = (config.width, config.height);
    let n = config.frames_per_sequence;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(seq_index as u64 + 1)));

    let vx = rng.gen_range(0.20..0.80) * w as f64;
    let vy = rng.gen_range(0.30..0.60) * h as f64;

    // One 16-frame event per 160-frame cycle (10% of frames), placed inside
    // a rotating speed block so every bucket sees events, aligned to the
    // 16-frame window grid.
    let mut event_ranges = Vec::new();
    let mut event_side_left = Vec::new();
    for c in 0..n / SPEED_CYCLE {
        let bucket = (seq_index + c) % 5;
        let offset = SPEED_BLOCK * bucket + EVENT_LEN * ((seq_index + c) % 2);
        let start = c * SPEED_CYCLE + offset;
        event_ranges.push((start, start + EVENT_LEN));
        event_side_left.push((c + seq_index) % 2 == 0);
    }

    let speeds: Vec<f64> = (0..n)
        .map(|i| {
            let base = BUCKET_SPEEDS[(i / SPEED_BLOCK) % 5];
            (base + rng.gen_range(-2.0..2.0)).max(0.0)
        })
        .collect();

    let seq_dir = root.join(&id);
    for sub in ["frames", "maps", "seg"] {
        let d = seq_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(d.display().to_string(), e))?;
    }

    let mut records = Vec::with_capacity(n);
    let mut phase = 0.0f64;
    for i in 0..n {
        phase += speeds[i] * 0.04;
        let event = event_ranges
            .iter()
            .enumerate()
            .find(|(_, (s, e))| i >= *s && i < *e)
            .map(|(k, (s, _))| {
                let u = (i - s) as f64 / (EVENT_LEN - 1) as f64;
                let x = if event_side_left[k] {
                    (0.10 + 0.25 * u) * w as f64
                } else {
                    (0.90 - 0.25 * u) * w as f64
                };
                let y = vy + 0.30 * (h as f64 - vy);
                (y, x)
            });

        let canvas = paint_frame(w, h, (vy, vx), landscape, seq_index, i, phase, event);
        let map = gaze_map(w, h, (vy, vx), speeds[i], event);

        let frame_rel = format!("{}/frames/{:06}.drvt", id, i);
        let map_rel = format!("{}/maps/{:06}.drvt", id, i);
        let seg_rel = format!("{}/seg/{:06}.drvt", id, i);
        write_tensor(&root.join(&frame_rel), &canvas.rgb_tensor(), DType::U8)?;
        write_tensor(&root.join(&map_rel), &map, DType::F32)?;
        write_tensor(&root.join(&seg_rel), &canvas.seg_tensor(), DType::U8)?;
        records.push(FrameRecord {
            frame_index: i,
            speed_kmh: speeds[i],
            landscape,
            frame_path: frame_rel,
            map_path: map_rel,
            seg_path: seg_rel,
        });
    }
    write_meta_csv(
        &seq_dir.join("meta.csv"),
        &SequenceRecord {
            id: id.clone(),
            frames: records,
        },
    )?;
    Ok(SequenceTruth {
        id,
        landscape,
        vanishing_point: (vy, vx),
        event_ranges,
    })
}

/// Normalized Gaussian mixture: vanishing point with speed-dependent spread,
/// plus a dominant component on the event vehicle during events.
fn gaze_map(w: usize, h: usize, vp: (f64, f64), speed: f64, event: Option<(f64, f64)>) -> Tensor {
    let frac = sigma_fraction_for_speed(speed);
    let (sy, sx) = (frac * h as f64, frac * w as f64);
    let (esy, esx) = (
        EVENT_SIGMA_FRACTION * h as f64,
        EVENT_SIGMA_FRACTION * w as f64,
    );
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let gauss = |cy: f64, cx: f64, sy: f64, sx: f64| {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                (-(dy * dy / (2.0 * sy * sy) + dx * dx / (2.0 * sx * sx))).exp()
            };
            let v = match event {
                Some((ey, ex)) => gauss(ey, ex, esy, esx) + 0.05 * gauss(vp.0, vp.1, sy, sx),
                None => gauss(vp.0, vp.1, sy, sx),
            };
            data.push(v);
        }
    }
    Tensor::from_vec(&[1, h, w], data).unwrap().max_normalized()
}

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<f64>,
    seg: Vec<f64>,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Canvas {
        Canvas {
            h,
            w,
            rgb: vec![0.0; 3 * h * w],
            seg: vec![CAT_SKY as f64; h * w],
        }
    }

    fn put(&mut self, y: usize, x: usize, color: [f64; 3], cat: u8) {
        for c in 0..3 {
            self.rgb[(c * self.h + y) * self.w + x] = color[c];
        }
        self.seg[y * self.w + x] = cat as f64;
    }

    fn fill_rect(&mut self, y0: f64, y1: f64, x0: f64, x1: f64, color: [f64; 3], cat: u8) {
        let ya = (y0.max(0.0) as usize).min(self.h);
        let yb = (y1.max(0.0).ceil() as usize).min(self.h);
        let xa = (x0.max(0.0) as usize).min(self.w);
        let xb = (x1.max(0.0).ceil() as usize).min(self.w);
        for y in ya..yb {
            for x in xa..xb {
                self.put(y, x, color, cat);
            }
        }
    }

    fn rgb_tensor(&self) -> Tensor {
        // stored as u8, so scale [0,1] to [0,255]
        Tensor::from_vec(&[3, self.h, self.w], self.rgb.iter().map(|v| v * 255.0).collect())
            .unwrap()
    }

    fn seg_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.h, self.w], self.seg.clone()).unwrap()
    }
}

#[allow(clippy::too_many_arguments)]
fn paint_frame(
    w: usize,
    h: usize,
    vp: (f64, f64),
    landscape: Landscape,
    seq_index: usize,
    frame: usize,
    phase: f64,
    event: Option<(f64, f64)>,
) -> Canvas {
    let (vy, vx) = vp;
    let (wf, hf) = (w as f64, h as f64);
    let mut canvas = Canvas::new(h, w);
    let fi = frame as f64;

    // sky with a vertical gradient
    for y in 0..h {
        let t = y as f64 / hf;
        let color = [0.45 + 0.2 * t, 0.65 + 0.15 * t, 0.90];
        if (y as f64) < vy {
            for x in 0..w {
                canvas.put(y, x, color, CAT_SKY);
            }
        }
    }

    // ground sides
    let (side_color, side_cat) = match landscape {
        Landscape::Downtown => ([0.46, 0.45, 0.47], CAT_BUILDINGS),
        Landscape::Countryside => ([0.22, 0.52, 0.20], CAT_TREES),
        Landscape::Highway => ([0.34, 0.48, 0.28], CAT_TREES),
    };
    canvas.fill_rect(vy, hf, 0.0, wf, side_color, side_cat);

    let half_bottom = 0.45 * wf;
    let road_half = |y: f64| -> f64 {
        let t = ((y - vy) / (hf - vy)).max(0.0);
        (t * half_bottom).max(1.0)
    };

    // sidewalk strips hugging the road (downtown)
    if landscape == Landscape::Downtown {
        for y in (vy.ceil() as usize)..h {
            let half = road_half(y as f64);
            let sw = 0.25 * half + 2.0;
            canvas.fill_rect(
                y as f64,
                y as f64 + 1.0,
                vx - half - sw,
                vx - half,
                [0.62, 0.62, 0.60],
                CAT_SIDEWALK,
            );
            canvas.fill_rect(
                y as f64,
                y as f64 + 1.0,
                vx + half,
                vx + half + sw,
                [0.62, 0.62, 0.60],
                CAT_SIDEWALK,
            );
        }
    }

    // road trapezoid with edge lines and moving center dashes
    for y in (vy.ceil() as usize)..h {
        let half = road_half(y as f64);
        canvas.fill_rect(
            y as f64,
            y as f64 + 1.0,
            vx - half,
            vx + half,
            [0.30, 0.30, 0.33],
            CAT_ROAD,
        );
        let edge = (0.10 * half).max(1.0);
        for side in [-1.0, 1.0] {
            let e = vx + side * half;
            canvas.fill_rect(
                y as f64,
                y as f64 + 1.0,
                e - edge / 2.0,
                e + edge / 2.0,
                [0.85, 0.85, 0.80],
                CAT_ROAD_LIMITS,
            );
        }
        // dashes scroll with the accumulated travel distance
        if ((y as f64 + phase) % 8.0) < 4.0 {
            canvas.fill_rect(
                y as f64,
                y as f64 + 1.0,
                vx - 0.6,
                vx + 0.6,
                [0.90, 0.90, 0.85],
                CAT_ROAD_LIMITS,
            );
        }
    }

    // landscape-specific scenery above the horizon
    match landscape {
        Landscape::Downtown => {
            canvas.fill_rect(0.12 * hf, vy, 0.0, 0.16 * wf, [0.40, 0.38, 0.42], CAT_BUILDINGS);
            canvas.fill_rect(0.10 * hf, vy, 0.84 * wf, wf, [0.43, 0.41, 0.40], CAT_BUILDINGS);
            // traffic light on the left sidewalk
            let tlx = vx - road_half(hf * 0.75) - 4.0;
            canvas.fill_rect(vy - 0.18 * hf, vy, tlx, tlx + 1.5, [0.25, 0.25, 0.25], CAT_SIGNS);
            canvas.fill_rect(
                vy - 0.22 * hf,
                vy - 0.16 * hf,
                tlx - 1.0,
                tlx + 2.5,
                [0.92, 0.80, 0.10],
                CAT_SIGNS,
            );
            // a pedestrian strolling along the right sidewalk
            let py = vy + 0.55 * (hf - vy);
            let px = vx + road_half(py) + 2.0 + ((fi * 0.15).sin() + 1.0) * 2.0;
            canvas.fill_rect(py - 3.0, py + 1.0, px, px + 1.8, [0.90, 0.60, 0.40], CAT_PEOPLE);
            if seq_index % 2 == 0 {
                // cyclist near the right road edge
                let cy = vy + 0.70 * (hf - vy);
                let cx = vx + road_half(cy) - 4.0;
                canvas.fill_rect(cy - 2.0, cy + 1.0, cx, cx + 2.5, [0.20, 0.20, 0.80], CAT_CYCLES);
            }
        }
        Landscape::Countryside => {
            for (bx, bw_, bh) in [(0.05, 0.12, 0.10), (0.78, 0.17, 0.13)] {
                canvas.fill_rect(
                    vy - bh * hf,
                    vy,
                    bx * wf,
                    (bx + bw_) * wf,
                    [0.15, 0.42, 0.15],
                    CAT_TREES,
                );
            }
        }
        Landscape::Highway => {
            canvas.fill_rect(
                vy - 0.22 * hf,
                vy - 0.12 * hf,
                0.80 * wf,
                0.90 * wf,
                [0.20, 0.55, 0.25],
                CAT_SIGNS,
            );
        }
    }

    // lead vehicle sitting on the vanishing point
    let osc = 1.2 * (fi * 0.2).sin();
    let (lvx, lvy) = (vx + osc, vy + 0.4);
    let (lhw, lhh) = (0.060 * wf, 0.045 * hf);
    canvas.fill_rect(lvy - lhh, lvy + lhh, lvx - lhw, lvx + lhw, [0.80, 0.14, 0.10], CAT_VEHICLES);
    canvas.fill_rect(
        lvy - 0.4 * lhh,
        lvy + 0.2 * lhh,
        lvx - 0.6 * lhw,
        lvx + 0.6 * lhw,
        [0.55, 0.75, 0.90],
        CAT_VEHICLES,
    );

    // passing vehicle during planted events
    if let Some((ey, ex)) = event {
        let (ehw, ehh) = (0.075 * wf, 0.055 * hf);
        canvas.fill_rect(ey - ehh, ey + ehh, ex - ehw, ex + ehw, [0.95, 0.52, 0.06], CAT_VEHICLES);
    }

    canvas
}

/// Category id list sanity hook for tests.
pub fn category_names() -> &'static [&'static str; 10] {
    &CATEGORY_NAMES
}
