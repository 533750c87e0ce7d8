//! Layer primitives: same-shape 3D/2D convolution, max pooling, nearest
//! upsampling, activations and MSE, each with its reverse-mode kernel.

use crate::error::{Error, Result};
use crate::tensor::{idx3, idx4, shape_string, Tensor};
use rayon::prelude::*;

/// 3D convolution with kernel 3x3x3, zero padding 1, unit stride.
/// input C x T x H x W, kernels C' x C x 3 x 3 x 3, bias C' -> C' x T x H x W.
pub fn conv3d(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (cin, t, h, w) = expect_rank4("conv3d input", input)?;
    let ks = kernels.shape();
    if ks.len() != 5 || ks[2] != 3 || ks[3] != 3 || ks[4] != 3 {
        return Err(Error::shape(
            "conv3d kernels",
            "C'xCx3x3x3",
            shape_string(ks),
        ));
    }
    let (cout, kc) = (ks[0], ks[1]);
    if kc != cin {
        return Err(Error::shape(
            "conv3d",
            format!("kernel input channels {}", cin),
            format!("{}", kc),
        ));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(
            "conv3d bias",
            format!("{}", cout),
            shape_string(bias.shape()),
        ));
    }

    let out_shape = [cout, t, h, w];
    let in_sh = input.shape();
    let ind = input.data();
    let kd = kernels.data();
    let bd = bias.data();
    let plane = t * h * w;

    let _ = in_sh;
    let mut out = vec![0.0; cout * plane];
    // Tap-wise accumulation: for each kernel tap, add a scaled shifted row of
    // the input to the output row. Rows are contiguous, so the inner loop is
    // a vectorizable fused multiply-add without bounds logic.
    out.par_chunks_mut(plane).enumerate().for_each(|(o, chunk)| {
        chunk.iter_mut().for_each(|v| *v = bd[o]);
        for c in 0..cin {
            let ichan = &ind[c * plane..(c + 1) * plane];
            for dt in 0..3usize {
                let (tlo, thi) = tap_range(t, dt);
                for dy in 0..3usize {
                    let (ylo, yhi) = tap_range(h, dy);
                    for dx in 0..3usize {
                        let (xlo, xhi) = tap_range(w, dx);
                        if xlo >= xhi || tlo >= thi || ylo >= yhi {
                            continue;
                        }
                        let kv = kd[(((o * cin + c) * 3 + dt) * 3 + dy) * 3 + dx];
                        if kv == 0.0 {
                            continue;
                        }
                        let run = xhi - xlo;
                        for ti in tlo..thi {
                            let tt = ti + dt - 1;
                            for yi in ylo..yhi {
                                let yy = yi + dy - 1;
                                let ob = (ti * h + yi) * w + xlo;
                                let ib = (tt * h + yy) * w + xlo + dx - 1;
                                let orow = &mut chunk[ob..ob + run];
                                let irow = &ichan[ib..ib + run];
                                for (a, &b) in orow.iter_mut().zip(irow) {
                                    *a += kv * b;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(&out_shape, out)
}

/// Valid output-index range for a padded 3-tap at offset `d` along an axis of
/// extent `n`: input index i + d - 1 stays inside [0, n).
#[inline]
fn tap_range(n: usize, d: usize) -> (usize, usize) {
    let lo = if d == 0 { 1 } else { 0 };
    let hi = if d == 2 { n.saturating_sub(1) } else { n };
    (lo, hi)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Gradients of conv3d w.r.t. (input, kernels, bias) given the output gradient.
pub fn conv3d_backward(
    input: &Tensor,
    kernels: &Tensor,
    gout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let in_sh = input.shape();
    let ks = kernels.shape();
    let (cin, t, h, w) = (in_sh[0], in_sh[1], in_sh[2], in_sh[3]);
    let cout = ks[0];
    let ind = input.data();
    let kd = kernels.data();
    let gd = gout.data();
    let plane = t * h * w;

    let mut gb = vec![0.0; cout];
    gb.par_iter_mut().enumerate().for_each(|(o, acc)| {
        *acc = gd[o * plane..(o + 1) * plane].iter().sum();
    });

    let mut gk = vec![0.0; kernels.len()];
    let ktaps = cin * 27;
    gk.par_chunks_mut(ktaps).enumerate().for_each(|(o, chunk)| {
        let gchan = &gd[o * plane..(o + 1) * plane];
        for c in 0..cin {
            let ichan = &ind[c * plane..(c + 1) * plane];
            for dt in 0..3usize {
                let (tlo, thi) = tap_range(t, dt);
                for dy in 0..3usize {
                    let (ylo, yhi) = tap_range(h, dy);
                    for dx in 0..3usize {
                        let (xlo, xhi) = tap_range(w, dx);
                        if xlo >= xhi || tlo >= thi || ylo >= yhi {
                            continue;
                        }
                        let run = xhi - xlo;
                        let mut acc = 0.0;
                        for ti in tlo..thi {
                            let tt = ti + dt - 1;
                            for yi in ylo..yhi {
                                let yy = yi + dy - 1;
                                let gb = (ti * h + yi) * w + xlo;
                                let ib = (tt * h + yy) * w + xlo + dx - 1;
                                acc += dot(&gchan[gb..gb + run], &ichan[ib..ib + run]);
                            }
                        }
                        chunk[((c * 3 + dt) * 3 + dy) * 3 + dx] = acc;
                    }
                }
            }
        }
    });

    let mut gin = vec![0.0; input.len()];
    gin.par_chunks_mut(plane).enumerate().for_each(|(c, chunk)| {
        for o in 0..cout {
            let gchan = &gd[o * plane..(o + 1) * plane];
            for dt in 0..3usize {
                let (tlo, thi) = tap_range(t, dt);
                for dy in 0..3usize {
                    let (ylo, yhi) = tap_range(h, dy);
                    for dx in 0..3usize {
                        let (xlo, xhi) = tap_range(w, dx);
                        if xlo >= xhi || tlo >= thi || ylo >= yhi {
                            continue;
                        }
                        let kv = kd[(((o * cin + c) * 3 + dt) * 3 + dy) * 3 + dx];
                        if kv == 0.0 {
                            continue;
                        }
                        let run = xhi - xlo;
                        for ti in tlo..thi {
                            let tt = ti + dt - 1;
                            for yi in ylo..yhi {
                                let yy = yi + dy - 1;
                                let gb = (ti * h + yi) * w + xlo;
                                let ib = (tt * h + yy) * w + xlo + dx - 1;
                                let grow = &gchan[gb..gb + run];
                                let irow = &mut chunk[ib..ib + run];
                                for (a, &g) in irow.iter_mut().zip(grow) {
                                    *a += kv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    (
        Tensor::from_vec(in_sh, gin).unwrap(),
        Tensor::from_vec(ks, gk).unwrap(),
        Tensor::from_vec(&[cout], gb).unwrap(),
    )
}

/// 2D convolution with kernel 3x3, zero padding 1, unit stride.
/// input C x H x W, kernels C' x C x 3 x 3, bias C' -> C' x H x W.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (cin, h, w) = expect_rank3("conv2d input", input)?;
    let ks = kernels.shape();
    if ks.len() != 4 || ks[2] != 3 || ks[3] != 3 {
        return Err(Error::shape("conv2d kernels", "C'xCx3x3", shape_string(ks)));
    }
    let (cout, kc) = (ks[0], ks[1]);
    if kc != cin {
        return Err(Error::shape(
            "conv2d",
            format!("kernel input channels {}", cin),
            format!("{}", kc),
        ));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(
            "conv2d bias",
            format!("{}", cout),
            shape_string(bias.shape()),
        ));
    }

    let ind = input.data();
    let kd = kernels.data();
    let bd = bias.data();
    let plane = h * w;

    let mut out = vec![0.0; cout * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(o, chunk)| {
        chunk.iter_mut().for_each(|v| *v = bd[o]);
        for c in 0..cin {
            let ichan = &ind[c * plane..(c + 1) * plane];
            for dy in 0..3usize {
                let (ylo, yhi) = tap_range(h, dy);
                for dx in 0..3usize {
                    let (xlo, xhi) = tap_range(w, dx);
                    if xlo >= xhi || ylo >= yhi {
                        continue;
                    }
                    let kv = kd[((o * cin + c) * 3 + dy) * 3 + dx];
                    if kv == 0.0 {
                        continue;
                    }
                    let run = xhi - xlo;
                    for yi in ylo..yhi {
                        let yy = yi + dy - 1;
                        let ob = yi * w + xlo;
                        let ib = yy * w + xlo + dx - 1;
                        let orow = &mut chunk[ob..ob + run];
                        let irow = &ichan[ib..ib + run];
                        for (a, &b) in orow.iter_mut().zip(irow) {
                            *a += kv * b;
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(&[cout, h, w], out)
}

pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    gout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let in_sh = input.shape();
    let ks = kernels.shape();
    let (cin, h, w) = (in_sh[0], in_sh[1], in_sh[2]);
    let cout = ks[0];
    let ind = input.data();
    let kd = kernels.data();
    let gd = gout.data();
    let plane = h * w;

    let mut gb = vec![0.0; cout];
    gb.par_iter_mut().enumerate().for_each(|(o, acc)| {
        *acc = gd[o * plane..(o + 1) * plane].iter().sum();
    });

    let mut gk = vec![0.0; kernels.len()];
    gk.par_chunks_mut(cin * 9).enumerate().for_each(|(o, chunk)| {
        let gchan = &gd[o * plane..(o + 1) * plane];
        for c in 0..cin {
            let ichan = &ind[c * plane..(c + 1) * plane];
            for dy in 0..3usize {
                let (ylo, yhi) = tap_range(h, dy);
                for dx in 0..3usize {
                    let (xlo, xhi) = tap_range(w, dx);
                    if xlo >= xhi || ylo >= yhi {
                        continue;
                    }
                    let run = xhi - xlo;
                    let mut acc = 0.0;
                    for yi in ylo..yhi {
                        let yy = yi + dy - 1;
                        let gb = yi * w + xlo;
                        let ib = yy * w + xlo + dx - 1;
                        acc += dot(&gchan[gb..gb + run], &ichan[ib..ib + run]);
                    }
                    chunk[(c * 3 + dy) * 3 + dx] = acc;
                }
            }
        }
    });

    let mut gin = vec![0.0; input.len()];
    gin.par_chunks_mut(plane).enumerate().for_each(|(c, chunk)| {
        for o in 0..cout {
            let gchan = &gd[o * plane..(o + 1) * plane];
            for dy in 0..3usize {
                let (ylo, yhi) = tap_range(h, dy);
                for dx in 0..3usize {
                    let (xlo, xhi) = tap_range(w, dx);
                    if xlo >= xhi || ylo >= yhi {
                        continue;
                    }
                    let kv = kd[((o * cin + c) * 3 + dy) * 3 + dx];
                    if kv == 0.0 {
                        continue;
                    }
                    let run = xhi - xlo;
                    for yi in ylo..yhi {
                        let yy = yi + dy - 1;
                        let gb = yi * w + xlo;
                        let ib = yy * w + xlo + dx - 1;
                        let grow = &gchan[gb..gb + run];
                        let irow = &mut chunk[ib..ib + run];
                        for (a, &g) in irow.iter_mut().zip(grow) {
                            *a += kv * g;
                        }
                    }
                }
            }
        }
    });

    (
        Tensor::from_vec(in_sh, gin).unwrap(),
        Tensor::from_vec(ks, gk).unwrap(),
        Tensor::from_vec(&[cout], gb).unwrap(),
    )
}

/// Max pooling over C x T x H x W. Pool extents must divide the input extents.
pub fn pool3d(input: &Tensor, pool: (usize, usize, usize)) -> Result<Tensor> {
    pool3d_with_argmax(input, pool, false).map(|(t, _)| t)
}

/// Max pooling that also reports, per output cell, the flat input index of
/// its maximum (first in scan order). `ceil_mode` allows non-divisible
/// extents by clipping the last window at the boundary.
pub fn pool3d_with_argmax(
    input: &Tensor,
    pool: (usize, usize, usize),
    ceil_mode: bool,
) -> Result<(Tensor, Vec<usize>)> {
    let (c, t, h, w) = expect_rank4("pool3d input", input)?;
    let (pt, ph, pw) = pool;
    for (name, p) in [("t", pt), ("h", ph), ("w", pw)] {
        if p == 0 || p > 2 {
            return Err(Error::InvalidArgument(format!(
                "pool3d: pool size {} on axis {} not in {{1,2}}",
                p, name
            )));
        }
    }
    if !ceil_mode {
        for (axis, extent, p) in [("t", t, pt), ("h", h, ph), ("w", w, pw)] {
            if extent % p != 0 {
                return Err(Error::NonDivisiblePool {
                    axis,
                    extent,
                    pool: p,
                });
            }
        }
    }
    let div_ceil = |a: usize, b: usize| (a + b - 1) / b;
    let (ot, oh, ow) = (div_ceil(t, pt), div_ceil(h, ph), div_ceil(w, pw));
    let in_sh = input.shape();
    let ind = input.data();
    let mut out = vec![0.0; c * ot * oh * ow];
    let mut arg = vec![0usize; out.len()];
    for ci in 0..c {
        for toi in 0..ot {
            for yoi in 0..oh {
                for xoi in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dt in 0..pt {
                        let ti = toi * pt + dt;
                        if ti >= t {
                            continue;
                        }
                        for dy in 0..ph {
                            let yi = yoi * ph + dy;
                            if yi >= h {
                                continue;
                            }
                            for dx in 0..pw {
                                let xi = xoi * pw + dx;
                                if xi >= w {
                                    continue;
                                }
                                let idx = idx4(in_sh, ci, ti, yi, xi);
                                if ind[idx] > best {
                                    best = ind[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    let oidx = ((ci * ot + toi) * oh + yoi) * ow + xoi;
                    out[oidx] = best;
                    arg[oidx] = best_idx;
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[c, ot, oh, ow], out)?, arg))
}

/// Scatter output gradients back through the pooling argmax.
pub fn pool_backward(argmax: &[usize], input_shape: &[usize], gout: &Tensor) -> Tensor {
    let mut gin = Tensor::zeros(input_shape);
    let gd = gout.data();
    let gid = gin.data_mut();
    for (o, &src) in argmax.iter().enumerate() {
        gid[src] += gd[o];
    }
    gin
}

/// Nearest-neighbor x2 spatial upsampling of C x H x W.
pub fn upsample2x(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = expect_rank3("upsample2x input", input)?;
    let in_sh = input.shape();
    let ind = input.data();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[(ci * oh + y) * ow + x] = ind[idx3(in_sh, ci, y / 2, x / 2)];
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

pub fn upsample2x_backward(input_shape: &[usize], gout: &Tensor) -> Tensor {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let gd = gout.data();
    let (oh, ow) = (2 * h, 2 * w);
    let mut gin = Tensor::zeros(input_shape);
    let gid = gin.data_mut();
    for ci in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                gid[idx3(input_shape, ci, y / 2, x / 2)] += gd[(ci * oh + y) * ow + x];
            }
        }
    }
    gin
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| x.max(0.0))
}

pub fn relu_backward(input: &Tensor, gout: &Tensor) -> Tensor {
    input
        .zip_with("relu_backward", gout, |x, g| if x > 0.0 { g } else { 0.0 })
        .unwrap()
}

pub fn leaky_relu(input: &Tensor, alpha: f64) -> Result<Tensor> {
    if alpha < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "leaky_relu: alpha {} must be nonnegative",
            alpha
        )));
    }
    Ok(input.map(|x| if x >= 0.0 { x } else { alpha * x }))
}

pub fn leaky_relu_backward(input: &Tensor, alpha: f64, gout: &Tensor) -> Tensor {
    input
        .zip_with("leaky_relu_backward", gout, |x, g| {
            if x >= 0.0 {
                g
            } else {
                alpha * g
            }
        })
        .unwrap()
}

/// Mean squared error over all elements.
pub fn mse(prediction: &Tensor, target: &Tensor) -> Result<f64> {
    if prediction.shape() != target.shape() {
        return Err(Error::shape(
            "mse",
            shape_string(prediction.shape()),
            shape_string(target.shape()),
        ));
    }
    let n = prediction.len() as f64;
    let sum: f64 = prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(sum / n)
}

/// Gradients of mse w.r.t. (prediction, target), scaled by the scalar
/// upstream gradient.
pub fn mse_backward(prediction: &Tensor, target: &Tensor, gscalar: f64) -> (Tensor, Tensor) {
    let n = prediction.len() as f64;
    let gpred = prediction
        .zip_with("mse_backward", target, |p, t| 2.0 * (p - t) / n * gscalar)
        .unwrap();
    let gtarget = gpred.scale(-1.0);
    (gpred, gtarget)
}

/// Central spatial crop of C x H x W to C x ch x cw.
pub fn crop_center2d(input: &Tensor, ch: usize, cw: usize) -> Result<Tensor> {
    let (c, h, w) = expect_rank3("crop_center2d input", input)?;
    if ch > h || cw > w {
        return Err(Error::shape(
            "crop_center2d",
            format!("crop at most {}x{}", h, w),
            format!("{}x{}", ch, cw),
        ));
    }
    let (oy, ox) = ((h - ch) / 2, (w - cw) / 2);
    let in_sh = input.shape();
    let ind = input.data();
    let mut out = vec![0.0; c * ch * cw];
    for ci in 0..c {
        for y in 0..ch {
            for x in 0..cw {
                out[(ci * ch + y) * cw + x] = ind[idx3(in_sh, ci, oy + y, ox + x)];
            }
        }
    }
    Tensor::from_vec(&[c, ch, cw], out)
}

pub fn crop_center2d_backward(input_shape: &[usize], gout: &Tensor) -> Tensor {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let gs = gout.shape();
    let (ch, cw) = (gs[1], gs[2]);
    let (oy, ox) = ((h - ch) / 2, (w - cw) / 2);
    let gd = gout.data();
    let mut gin = Tensor::zeros(input_shape);
    let gid = gin.data_mut();
    for ci in 0..c {
        for y in 0..ch {
            for x in 0..cw {
                gid[idx3(input_shape, ci, oy + y, ox + x)] += gd[(ci * ch + y) * cw + x];
            }
        }
    }
    gin
}

/// Channel-wise concatenation of rank-3 tensors with equal spatial extents.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::InvalidArgument("concat_channels: empty input".into()));
    }
    let (h, w) = {
        let s = parts[0].shape();
        if s.len() != 3 {
            return Err(Error::shape("concat_channels", "rank 3", shape_string(s)));
        }
        (s[1], s[2])
    };
    let mut c_total = 0;
    for p in parts {
        let s = p.shape();
        if s.len() != 3 || s[1] != h || s[2] != w {
            return Err(Error::shape(
                "concat_channels",
                format!("Cx{}x{}", h, w),
                shape_string(s),
            ));
        }
        c_total += s[0];
    }
    let mut data = Vec::with_capacity(c_total * h * w);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(&[c_total, h, w], data)
}

/// Split a concatenated gradient back into per-part gradients.
pub fn concat_channels_backward(part_shapes: &[Vec<usize>], gout: &Tensor) -> Vec<Tensor> {
    let gd = gout.data();
    let mut offset = 0;
    part_shapes
        .iter()
        .map(|s| {
            let len: usize = s.iter().product();
            let t = Tensor::from_vec(s, gd[offset..offset + len].to_vec()).unwrap();
            offset += len;
            t
        })
        .collect()
}

/// Horizontal flip along the last axis.
pub fn flip_horizontal(input: &Tensor) -> Tensor {
    let shape = input.shape().to_vec();
    let w = *shape.last().expect("flip on rank >= 1");
    let rows = input.len() / w;
    let ind = input.data();
    let mut out = vec![0.0; input.len()];
    for r in 0..rows {
        for x in 0..w {
            out[r * w + x] = ind[r * w + (w - 1 - x)];
        }
    }
    Tensor::from_vec(&shape, out).unwrap()
}

/// Bilinear resize of C x H x W to C x oh x ow (pixel-center alignment).
pub fn resize_bilinear(input: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (c, h, w) = expect_rank3("resize_bilinear input", input)?;
    let in_sh = input.shape();
    let ind = input.data();
    let mut out = vec![0.0; c * oh * ow];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for ci in 0..c {
        for y in 0..oh {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for x in 0..ow {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let v00 = ind[idx3(in_sh, ci, y0, x0)];
                let v01 = ind[idx3(in_sh, ci, y0, x1)];
                let v10 = ind[idx3(in_sh, ci, y1, x0)];
                let v11 = ind[idx3(in_sh, ci, y1, x1)];
                out[(ci * oh + y) * ow + x] = v00 * (1.0 - wy) * (1.0 - wx)
                    + v01 * (1.0 - wy) * wx
                    + v10 * wy * (1.0 - wx)
                    + v11 * wy * wx;
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

fn expect_rank4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::shape(op, "rank 4", shape_string(s)));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

fn expect_rank3(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::shape(op, "rank 3", shape_string(s)));
    }
    Ok((s[0], s[1], s[2]))
}
