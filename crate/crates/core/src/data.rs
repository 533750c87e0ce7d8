//! Clip assembly, crop policies, mirroring, train/validation splitting and
//! the on-disk dataset layout.
//!
//! A dataset root holds one directory per sequence, each with a `meta.csv`
//! (columns frame_index, speed_kmh, landscape, frame_path, map_path,
//! seg_path; paths relative to the root) plus the referenced DRVT tensors.

use crate::error::{Error, Result};
use crate::io::{read_tensor, DType};
use crate::ops::{flip_horizontal, resize_bilinear};
use crate::tensor::{shape_string, Tensor};
use rand::Rng;
use std::cell::RefCell;
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Landscape {
    Downtown,
    Countryside,
    Highway,
}

impl Landscape {
    pub fn as_str(self) -> &'static str {
        match self {
            Landscape::Downtown => "downtown",
            Landscape::Countryside => "countryside",
            Landscape::Highway => "highway",
        }
    }

    pub fn parse(s: &str) -> Option<Landscape> {
        match s {
            "downtown" => Some(Landscape::Downtown),
            "countryside" => Some(Landscape::Countryside),
            "highway" => Some(Landscape::Highway),
            _ => None,
        }
    }

    pub const ALL: [Landscape; 3] = [
        Landscape::Downtown,
        Landscape::Countryside,
        Landscape::Highway,
    ];
}

/// Per-frame metadata.
#[derive(Clone, Debug)]
pub struct FrameRecord {
    pub frame_index: usize,
    pub speed_kmh: f64,
    pub landscape: Landscape,
    pub frame_path: String,
    pub map_path: String,
    pub seg_path: String,
}

#[derive(Clone, Debug)]
pub struct SequenceRecord {
    pub id: String,
    pub frames: Vec<FrameRecord>,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// 16 consecutive RGB frames ending at `end_frame`.
#[derive(Clone, Debug)]
pub struct VideoClip {
    pub frames: Tensor, // 3 x 16 x H x W
    pub sequence_id: String,
    pub end_frame: usize,
}

pub const CLIP_LEN: usize = 16;

/// Stack frames [end_index - 15, end_index] into a 3x16xHxW clip.
pub fn make_clip(frames: &[Tensor], sequence_id: &str, end_index: usize) -> Result<VideoClip> {
    if end_index < CLIP_LEN - 1 || end_index >= frames.len() {
        return Err(Error::InvalidArgument(format!(
            "make_clip: end_index {} out of range for {} frames",
            end_index,
            frames.len()
        )));
    }
    let first = frames[end_index].shape();
    if first.len() != 3 || first[0] != 3 {
        return Err(Error::shape("make_clip", "3xHxW frames", shape_string(first)));
    }
    let (h, w) = (first[1], first[2]);
    let mut data = Vec::with_capacity(3 * CLIP_LEN * h * w);
    for c in 0..3 {
        for t in 0..CLIP_LEN {
            let f = &frames[end_index - (CLIP_LEN - 1) + t];
            if f.shape() != first {
                return Err(Error::shape("make_clip", shape_string(first), shape_string(f.shape())));
            }
            data.extend_from_slice(&f.data()[c * h * w..(c + 1) * h * w]);
        }
    }
    Ok(VideoClip {
        frames: Tensor::from_vec(&[3, CLIP_LEN, h, w], data)?,
        sequence_id: sequence_id.to_string(),
        end_frame: end_index,
    })
}

/// Bilinear resize of every frame of a 3x16xHxW clip.
pub fn resize_clip(clip: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let s = clip.shape();
    if s.len() != 4 || s[0] != 3 {
        return Err(Error::shape("resize_clip", "3xTxHxW", shape_string(s)));
    }
    let (t, h, w) = (s[1], s[2], s[3]);
    let plane = h * w;
    let oplane = oh * ow;
    let mut out = vec![0.0; 3 * t * oplane];
    for ti in 0..t {
        let mut frame = Vec::with_capacity(3 * plane);
        for c in 0..3 {
            let off = (c * t + ti) * plane;
            frame.extend_from_slice(&clip.data()[off..off + plane]);
        }
        let resized = resize_bilinear(&Tensor::from_vec(&[3, h, w], frame)?, oh, ow)?;
        for c in 0..3 {
            let src = &resized.data()[c * oplane..(c + 1) * oplane];
            out[(c * t + ti) * oplane..(c * t + ti + 1) * oplane].copy_from_slice(src);
        }
    }
    Tensor::from_vec(&[3, t, oh, ow], out)
}

/// Extract frame `t` of a 3xTxHxW clip as 3xHxW.
pub fn clip_frame(clip: &Tensor, t: usize) -> Result<Tensor> {
    let s = clip.shape();
    if s.len() != 4 || s[0] != 3 || t >= s[1] {
        return Err(Error::shape("clip_frame", "3xTxHxW", shape_string(s)));
    }
    let plane = s[2] * s[3];
    let mut data = Vec::with_capacity(3 * plane);
    for c in 0..3 {
        let off = (c * s[1] + t) * plane;
        data.extend_from_slice(&clip.data()[off..off + plane]);
    }
    Tensor::from_vec(&[3, s[2], s[3]], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropPolicy {
    /// Resize to 8/7 of the crop side (128 at full scale) before cropping.
    Mild,
    /// Resize to 16/7 of the crop side (256 at full scale): the crop covers
    /// less than a quarter of the image.
    Aggressive,
}

impl CropPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            CropPolicy::Mild => "mild",
            CropPolicy::Aggressive => "aggressive",
        }
    }

    pub fn parse(s: &str) -> Option<CropPolicy> {
        match s {
            "mild" => Some(CropPolicy::Mild),
            "aggressive" => Some(CropPolicy::Aggressive),
            _ => None,
        }
    }

    pub fn resize_side(self, crop_side: usize) -> usize {
        match self {
            CropPolicy::Mild => crop_side * 8 / 7,
            CropPolicy::Aggressive => crop_side * 16 / 7,
        }
    }
}

/// One augmented sample: the identical random window applied to clip and map,
/// plus the whole-frame stream at network and refinement resolutions.
#[derive(Clone, Debug)]
pub struct CropSample {
    pub cropped_clip: Tensor,  // 3 x 16 x S x S
    pub cropped_map: Tensor,   // 1 x S x S
    pub resized_clip: Tensor,  // 3 x 16 x S x S
    pub full_map: Tensor,      // 1 x R x R
    pub last_frame: Tensor,    // 3 x R x R
    pub crop_origin: (usize, usize),
}

pub fn crop_sample(
    clip: &Tensor,
    map: &Tensor,
    policy: CropPolicy,
    crop_side: usize,
    refine_res: usize,
    rng: &mut impl Rng,
) -> Result<CropSample> {
    let resize_side = policy.resize_side(crop_side);
    let big_clip = resize_clip(clip, resize_side, resize_side)?;
    let ms = map.shape();
    if ms.len() != 3 || ms[0] != 1 {
        return Err(Error::shape("crop_sample map", "1xHxW", shape_string(ms)));
    }
    let big_map = resize_bilinear(map, resize_side, resize_side)?;
    let max_origin = resize_side - crop_side;
    let oy = rng.gen_range(0..=max_origin);
    let ox = rng.gen_range(0..=max_origin);
    let cropped_clip = crop_clip(&big_clip, oy, ox, crop_side)?;
    let cropped_map = crop_map(&big_map, oy, ox, crop_side)?;
    let resized_clip = resize_clip(clip, crop_side, crop_side)?;
    let full_map = resize_bilinear(map, refine_res, refine_res)?;
    let last = clip_frame(clip, CLIP_LEN - 1)?;
    let last_frame = resize_bilinear(&last, refine_res, refine_res)?;
    Ok(CropSample {
        cropped_clip,
        cropped_map,
        resized_clip,
        full_map,
        last_frame,
        crop_origin: (oy, ox),
    })
}

fn crop_clip(clip: &Tensor, oy: usize, ox: usize, side: usize) -> Result<Tensor> {
    let s = clip.shape();
    let (t, h, w) = (s[1], s[2], s[3]);
    let mut data = Vec::with_capacity(3 * t * side * side);
    for c in 0..3 {
        for ti in 0..t {
            for y in 0..side {
                let row = ((c * t + ti) * h + oy + y) * w + ox;
                data.extend_from_slice(&clip.data()[row..row + side]);
            }
        }
    }
    Tensor::from_vec(&[3, t, side, side], data)
}

fn crop_map(map: &Tensor, oy: usize, ox: usize, side: usize) -> Result<Tensor> {
    let s = map.shape();
    let (_h, w) = (s[1], s[2]);
    let mut data = Vec::with_capacity(side * side);
    for y in 0..side {
        let row = (oy + y) * w + ox;
        data.extend_from_slice(&map.data()[row..row + side]);
    }
    Tensor::from_vec(&[1, side, side], data)
}

/// With probability 0.5 flip clip and map horizontally, together.
pub fn mirror(clip: &Tensor, map: &Tensor, rng: &mut impl Rng) -> (Tensor, Tensor, bool) {
    if rng.gen_bool(0.5) {
        (flip_horizontal(clip), flip_horizontal(map), true)
    } else {
        (clip.clone(), map.clone(), false)
    }
}

// ---------------------------------------------------------------------------
// Splitting

pub const VALIDATION_FRAMES: usize = 500;
const MIN_FULL_VALIDATION_LEN: usize = 516;

/// Frame-level split of one training sequence.
#[derive(Clone, Debug)]
pub struct SequenceSplit {
    pub id: String,
    /// Half-open validation frame range.
    pub validation_range: (usize, usize),
    pub train_clip_ends: Vec<usize>,
    pub validation_clip_ends: Vec<usize>,
    pub warning: Option<String>,
}

/// Central 500 frames become validation; a sequence too short for that falls
/// back to its central third. Training clips never overlap validation frames.
pub fn split_sequence(id: &str, len: usize) -> Result<SequenceSplit> {
    if len < CLIP_LEN {
        return Err(Error::InvalidArgument(format!(
            "split: sequence {} has only {} frames",
            id, len
        )));
    }
    let (vs, ve, warning) = if len >= MIN_FULL_VALIDATION_LEN {
        let mid = len / 2;
        (
            mid - VALIDATION_FRAMES / 2,
            mid + VALIDATION_FRAMES / 2,
            None,
        )
    } else {
        (
            len / 3,
            2 * len / 3,
            Some(format!(
                "sequence {} has {} < {} frames; validation shrunk to the central third",
                id, len, MIN_FULL_VALIDATION_LEN
            )),
        )
    };
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for e in (CLIP_LEN - 1)..len {
        let start = e + 1 - CLIP_LEN;
        if e < vs || start >= ve {
            train.push(e);
        } else if start >= vs && e < ve {
            validation.push(e);
        }
    }
    Ok(SequenceSplit {
        id: id.to_string(),
        validation_range: (vs, ve),
        train_clip_ends: train,
        validation_clip_ends: validation,
        warning,
    })
}

// ---------------------------------------------------------------------------
// On-disk dataset

pub struct Dataset {
    pub root: PathBuf,
    pub sequences: Vec<SequenceRecord>,
    cache: RefCell<HashMap<String, Rc<Tensor>>>,
}

impl Dataset {
    /// Scan `root` for sequence directories (sorted by name) with a meta.csv.
    pub fn open(root: &Path) -> Result<Dataset> {
        let mut dirs: Vec<PathBuf> = fs::read_dir(root)
            .map_err(|e| Error::io(root.display().to_string(), e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir() && p.join("meta.csv").is_file())
            .collect();
        dirs.sort();
        if dirs.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no sequence directories with meta.csv under {}",
                root.display()
            )));
        }
        let sequences = dirs
            .iter()
            .map(|d| read_meta_csv(&d.join("meta.csv")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            root: root.to_path_buf(),
            sequences,
            cache: RefCell::new(HashMap::new()),
        })
    }

    pub fn sequence(&self, id: &str) -> Option<&SequenceRecord> {
        self.sequences.iter().find(|s| s.id == id)
    }

    fn load(&self, rel: &str, normalize_u8: bool) -> Result<Rc<Tensor>> {
        if let Some(t) = self.cache.borrow().get(rel) {
            return Ok(Rc::clone(t));
        }
        let (raw, dtype) = read_tensor(&self.root.join(rel))?;
        let tensor = if normalize_u8 && dtype == DType::U8 {
            raw.scale(1.0 / 255.0)
        } else {
            raw
        };
        let rc = Rc::new(tensor);
        let mut cache = self.cache.borrow_mut();
        if cache.len() > 4096 {
            cache.clear();
        }
        cache.insert(rel.to_string(), Rc::clone(&rc));
        Ok(rc)
    }

    /// RGB frame 3xHxW with values in [0, 1].
    pub fn frame(&self, seq: &SequenceRecord, index: usize) -> Result<Rc<Tensor>> {
        self.load(&seq.frames[index].frame_path, true)
    }

    /// Attention map 1xHxW with values in [0, 1].
    pub fn map(&self, seq: &SequenceRecord, index: usize) -> Result<Rc<Tensor>> {
        self.load(&seq.frames[index].map_path, true)
    }

    /// Segmentation label map HxW of category ids 0..9.
    pub fn seg(&self, seq: &SequenceRecord, index: usize) -> Result<Rc<Tensor>> {
        self.load(&seq.frames[index].seg_path, false)
    }

    /// Assemble the 3x16xHxW clip ending at `end_index`.
    pub fn clip(&self, seq: &SequenceRecord, end_index: usize) -> Result<Tensor> {
        if end_index < CLIP_LEN - 1 || end_index >= seq.len() {
            return Err(Error::InvalidArgument(format!(
                "clip: end_index {} out of range for sequence {} ({} frames)",
                end_index,
                seq.id,
                seq.len()
            )));
        }
        let frames: Vec<Tensor> = (end_index + 1 - CLIP_LEN..=end_index)
            .map(|i| self.frame(seq, i).map(|t| (*t).clone()))
            .collect::<Result<_>>()?;
        Ok(make_clip(&frames, &seq.id, CLIP_LEN - 1)?.frames)
    }
}

pub fn read_meta_csv(path: &Path) -> Result<SequenceRecord> {
    let pstr = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(pstr.clone(), e))?;
    let id = path
        .parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut frames = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue; // header
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(Error::format(&pstr, format!("line {}: expected 6 columns", lineno + 1)));
        }
        let frame_index: usize = cols[0]
            .parse()
            .map_err(|_| Error::format(&pstr, format!("line {}: bad frame_index", lineno + 1)))?;
        let speed_kmh: f64 = cols[1]
            .parse()
            .map_err(|_| Error::format(&pstr, format!("line {}: bad speed", lineno + 1)))?;
        if speed_kmh < 0.0 {
            return Err(Error::format(&pstr, format!("line {}: negative speed", lineno + 1)));
        }
        let landscape = Landscape::parse(cols[2])
            .ok_or_else(|| Error::format(&pstr, format!("line {}: unknown landscape {}", lineno + 1, cols[2])))?;
        if frame_index != frames.len() {
            return Err(Error::format(
                &pstr,
                format!("line {}: frame_index {} out of order", lineno + 1, frame_index),
            ));
        }
        frames.push(FrameRecord {
            frame_index,
            speed_kmh,
            landscape,
            frame_path: cols[3].to_string(),
            map_path: cols[4].to_string(),
            seg_path: cols[5].to_string(),
        });
    }
    Ok(SequenceRecord { id, frames })
}

pub fn write_meta_csv(path: &Path, seq: &SequenceRecord) -> Result<()> {
    let mut out = String::from("frame_index,speed_kmh,landscape,frame_path,map_path,seg_path\n");
    for f in &seq.frames {
        out.push_str(&format!(
            "{},{:.3},{},{},{},{}\n",
            f.frame_index,
            f.speed_kmh,
            f.landscape.as_str(),
            f.frame_path,
            f.map_path,
            f.seg_path
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}
