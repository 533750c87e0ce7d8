//! Portable tensor container ("DRVT") and image exports.
//!
//! Container layout, little-endian:
//!   magic "DRVT" (4 bytes), format version u32, dtype code u32
//!   (0 = f32, 1 = f64, 2 = u8), rank u32 (at most 8), rank x u64 extents,
//!   row-major payload.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"DRVT";
pub const FORMAT_VERSION: u32 = 1;
pub const MAX_RANK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn code(self) -> u32 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8 => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<DType> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

pub fn write_tensor(path: &Path, tensor: &Tensor, dtype: DType) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    write_tensor_to(&mut w, tensor, dtype).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_tensor_to(w: &mut impl Write, tensor: &Tensor, dtype: DType) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&dtype.code().to_le_bytes())?;
    w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match dtype {
        DType::F32 => {
            for &v in tensor.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        DType::F64 => {
            for &v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        DType::U8 => {
            for &v in tensor.data() {
                w.write_all(&[v.clamp(0.0, 255.0).round() as u8])?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<(Tensor, DType)> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    read_tensor_from(&mut r, &path.display().to_string())
}

pub fn read_tensor_from(r: &mut impl Read, path: &str) -> Result<(Tensor, DType)> {
    let fail = |msg: &str| Error::format(path, msg);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| fail("truncated header"))?;
    if &magic != MAGIC {
        return Err(fail("bad magic"));
    }
    let version = read_u32(r).map_err(|_| fail("truncated header"))?;
    if version != FORMAT_VERSION {
        return Err(fail(&format!("unsupported format version {}", version)));
    }
    let code = read_u32(r).map_err(|_| fail("truncated header"))?;
    let dtype = DType::from_code(code).ok_or_else(|| fail(&format!("unknown dtype code {}", code)))?;
    let rank = read_u32(r).map_err(|_| fail("truncated header"))? as usize;
    if rank > MAX_RANK {
        return Err(fail(&format!("rank {} exceeds maximum {}", rank, MAX_RANK)));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf).map_err(|_| fail("truncated extents"))?;
        shape.push(u64::from_le_bytes(buf) as usize);
    }
    let len: usize = shape.iter().product();
    let mut payload = vec![0u8; len * dtype.byte_width()];
    r.read_exact(&mut payload)
        .map_err(|_| fail("truncated payload"))?;
    let data: Vec<f64> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::U8 => payload.iter().map(|&b| b as f64).collect(),
    };
    Ok((Tensor::from_vec(&shape, data)?, dtype))
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// 8-bit binary PGM of a single-channel map (peak-normalized to 255).
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w) = plane_dims(map)?;
    let peak = map.max_value();
    let scale = if peak > 0.0 { 255.0 / peak } else { 0.0 };
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    let mut run = || -> std::io::Result<()> {
        write!(out, "P5\n{} {}\n255\n", w, h)?;
        for &v in map.data() {
            out.write_all(&[(v * scale).clamp(0.0, 255.0).round() as u8])?;
        }
        Ok(())
    };
    run().map_err(|e| Error::io(path.display().to_string(), e))
}

/// 8-bit binary PPM of a 3xHxW RGB tensor with values in [0, 1].
pub fn write_ppm(path: &Path, rgb: &Tensor) -> Result<()> {
    let s = rgb.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape(
            "write_ppm",
            "3xHxW",
            crate::tensor::shape_string(s),
        ));
    }
    let (h, w) = (s[1], s[2]);
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    let data = rgb.data();
    let mut run = || -> std::io::Result<()> {
        write!(out, "P6\n{} {}\n255\n", w, h)?;
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = data[(c * h + y) * w + x];
                    out.write_all(&[(v * 255.0).clamp(0.0, 255.0).round() as u8])?;
                }
            }
        }
        Ok(())
    };
    run().map_err(|e| Error::io(path.display().to_string(), e))
}

fn plane_dims(map: &Tensor) -> Result<(usize, usize)> {
    let s = map.shape();
    match s {
        [h, w] => Ok((*h, *w)),
        [1, h, w] => Ok((*h, *w)),
        _ => Err(Error::shape(
            "write_pgm",
            "HxW or 1xHxW",
            crate::tensor::shape_string(s),
        )),
    }
}
