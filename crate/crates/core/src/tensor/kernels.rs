//! Forward and backward kernels on plain tensors.
//!
//! These are pure functions: they never mutate their inputs. The autograd
//! graph calls them, and tests can call them directly.

use rayon::prelude::*;

use super::gemm::{gemm, Mat};
use super::Tensor;
use crate::error::{Error, Result};

/// Minimum number of output values per parallel task.
const PAR_CHUNK: usize = 4096;

fn spatial(dims: [usize; 5]) -> [usize; 3] {
    [dims[2], dims[3], dims[4]]
}

fn volume(s: [usize; 3]) -> usize {
    s[0] * s[1] * s[2]
}

/// Copies `src[ch, o·stride + off − pad]` into `dst[ch, o]`, writing zero
/// where the source index falls outside `src_dims`.
#[allow(clippy::too_many_arguments)]
fn gather_tap(
    src: &[f64],
    src_dims: [usize; 3],
    channels: usize,
    out_dims: [usize; 3],
    off: [usize; 3],
    stride: usize,
    pad: usize,
    dst: &mut [f64],
) {
    let sv = volume(src_dims);
    let ov = volume(out_dims);
    let [sd, sh, sw] = src_dims;
    let [od_n, oh_n, ow_n] = out_dims;
    // Valid output range along w: 0 <= ow*stride + off - pad < sw.
    let w_lo = pad.saturating_sub(off[2]).div_ceil(stride).min(ow_n);
    let w_hi = if sw + pad > off[2] {
        ((sw + pad - off[2] - 1) / stride + 1).min(ow_n)
    } else {
        0
    };
    let per_channel = |(ch, out): (usize, &mut [f64])| {
        let src = &src[ch * sv..(ch + 1) * sv];
        for od in 0..od_n {
            let id = (od * stride + off[0]) as isize - pad as isize;
            for oh in 0..oh_n {
                let row = &mut out[(od * oh_n + oh) * ow_n..(od * oh_n + oh + 1) * ow_n];
                let ih = (oh * stride + off[1]) as isize - pad as isize;
                if id < 0 || id >= sd as isize || ih < 0 || ih >= sh as isize || w_lo >= w_hi {
                    row.fill(0.0);
                    continue;
                }
                let base = (id as usize * sh + ih as usize) * sw;
                row[..w_lo].fill(0.0);
                row[w_hi..].fill(0.0);
                if stride == 1 {
                    let start = base + w_lo + off[2] - pad;
                    row[w_lo..w_hi].copy_from_slice(&src[start..start + (w_hi - w_lo)]);
                } else {
                    for (ow, v) in row.iter_mut().enumerate().take(w_hi).skip(w_lo) {
                        *v = src[base + ow * stride + off[2] - pad];
                    }
                }
            }
        }
    };
    let dst = &mut dst[..channels * ov];
    if channels * ov >= 2 * PAR_CHUNK {
        dst.par_chunks_mut(ov).enumerate().for_each(per_channel);
    } else {
        dst.chunks_mut(ov).enumerate().for_each(per_channel);
    }
}

/// Adjoint of [`gather_tap`]: adds `col[ch, o]` into `dst[ch, o·stride + off − pad]`.
#[allow(clippy::too_many_arguments)]
fn scatter_tap(
    col: &[f64],
    dst: &mut [f64],
    dst_dims: [usize; 3],
    channels: usize,
    col_dims: [usize; 3],
    off: [usize; 3],
    stride: usize,
    pad: usize,
) {
    let dv = volume(dst_dims);
    let cv = volume(col_dims);
    let [dd, dh, dw] = dst_dims;
    let [cd, ch_, cw] = col_dims;
    let per_channel = |(ch, dst): (usize, &mut [f64])| {
        let col = &col[ch * cv..(ch + 1) * cv];
        for od in 0..cd {
            let id = (od * stride + off[0]) as isize - pad as isize;
            if id < 0 || id >= dd as isize {
                continue;
            }
            for oh in 0..ch_ {
                let ih = (oh * stride + off[1]) as isize - pad as isize;
                if ih < 0 || ih >= dh as isize {
                    continue;
                }
                let base = (id as usize * dh + ih as usize) * dw;
                let row = &col[(od * ch_ + oh) * cw..(od * ch_ + oh + 1) * cw];
                for (ow, v) in row.iter().enumerate() {
                    let iw = (ow * stride + off[2]) as isize - pad as isize;
                    if iw >= 0 && (iw as usize) < dw {
                        dst[base + iw as usize] += v;
                    }
                }
            }
        }
    };
    let dst = &mut dst[..channels * dv];
    if channels * cv >= 2 * PAR_CHUNK {
        dst.par_chunks_mut(dv).enumerate().for_each(per_channel);
    } else {
        dst.chunks_mut(dv).enumerate().for_each(per_channel);
    }
}

fn kernel_taps(k: [usize; 3]) -> impl Iterator<Item = (usize, [usize; 3])> {
    (0..k[0])
        .flat_map(move |a| (0..k[1]).flat_map(move |b| (0..k[2]).map(move |c| [a, b, c])))
        .enumerate()
}

struct ConvGeom {
    n: usize,
    cin: usize,
    cout: usize,
    k: [usize; 3],
    in_dims: [usize; 3],
    out_dims: [usize; 3],
}

fn conv_geom(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    if stride == 0 {
        return Err(Error::config("conv3d stride must be at least 1"));
    }
    let xd = x.dims5()?;
    let wd = w.dims5()?;
    let (n, cin) = (xd[0], xd[1]);
    let (cout, wcin) = (wd[0], wd[1]);
    if wcin != cin {
        return Err(Error::config(format!(
            "conv3d input has {cin} channels but the weight expects {wcin}"
        )));
    }
    let k = [wd[2], wd[3], wd[4]];
    let in_dims = spatial(xd);
    let mut out_dims = [0; 3];
    for a in 0..3 {
        let padded = in_dims[a] + 2 * pad;
        if k[a] > padded {
            return Err(Error::config(format!(
                "conv3d kernel {:?} does not fit padded input {:?}",
                k, in_dims
            )));
        }
        out_dims[a] = (padded - k[a]) / stride + 1;
    }
    Ok(ConvGeom {
        n,
        cin,
        cout,
        k,
        in_dims,
        out_dims,
    })
}

fn check_bias(b: Option<&Tensor>, channels: usize) -> Result<()> {
    if let Some(b) = b {
        if b.shape() != [channels] {
            return Err(Error::config(format!(
                "bias shape {:?} does not match {channels} output channels",
                b.shape()
            )));
        }
    }
    Ok(())
}

fn add_bias(out: &mut [f64], b: Option<&Tensor>, n: usize, c: usize, v: usize) {
    if let Some(b) = b {
        for s in 0..n {
            for (ch, bias) in b.data().iter().enumerate() {
                let start = (s * c + ch) * v;
                out[start..start + v].iter_mut().for_each(|o| *o += bias);
            }
        }
    }
}

fn bias_grad(gout: &Tensor) -> Tensor {
    let [n, c, ..] = gout.dims5().expect("5-D gradient");
    let v = gout.len() / (n * c);
    let mut gb = vec![0.0; c];
    for s in 0..n {
        for (ch, g) in gb.iter_mut().enumerate() {
            let start = (s * c + ch) * v;
            *g += gout.data()[start..start + v].iter().sum::<f64>();
        }
    }
    Tensor::new(vec![c], gb).expect("bias gradient shape")
}

/// 3-D convolution with zero padding.
///
/// `x` is `[N, Cin, D, H, W]`, `w` is `[Cout, Cin, kd, kh, kw]`, `b` is `[Cout]`.
pub fn conv3d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let g = conv_geom(x, w, stride, pad)?;
    check_bias(b, g.cout)?;
    let iv = volume(g.in_dims);
    let ov = volume(g.out_dims);
    let kv = volume(g.k);
    let mut out = vec![0.0; g.n * g.cout * ov];
    let mut col = vec![0.0; g.cin * ov];
    for s in 0..g.n {
        let xs = &x.data()[s * g.cin * iv..(s + 1) * g.cin * iv];
        let os = &mut out[s * g.cout * ov..(s + 1) * g.cout * ov];
        for (t, off) in kernel_taps(g.k) {
            gather_tap(xs, g.in_dims, g.cin, g.out_dims, off, stride, pad, &mut col);
            let wm = Mat {
                rows: g.cout,
                cols: g.cin,
                row_stride: g.cin * kv,
                col_stride: kv,
            };
            gemm(
                &w.data()[t..],
                wm,
                &col,
                Mat::row_major(g.cin, ov),
                1.0,
                os,
                Mat::row_major(g.cout, ov),
            );
        }
    }
    add_bias(&mut out, b, g.n, g.cout, ov);
    let mut shape = vec![g.n, g.cout];
    shape.extend_from_slice(&g.out_dims);
    Tensor::new(shape, out)
}

/// Gradients of a convolution or transposed convolution.
#[derive(Debug)]
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Tensor,
}

/// Backward pass of [`conv3d`] for the upstream gradient `gout`.
pub fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
    want_input: bool,
    want_weight: bool,
) -> Result<ConvGrads> {
    let g = conv_geom(x, w, stride, pad)?;
    let iv = volume(g.in_dims);
    let ov = volume(g.out_dims);
    let kv = volume(g.k);
    let mut gx = want_input.then(|| vec![0.0; x.len()]);
    let mut gw = want_weight.then(|| vec![0.0; w.len()]);
    let mut col = vec![0.0; g.cin * ov];
    for s in 0..g.n {
        let xs = &x.data()[s * g.cin * iv..(s + 1) * g.cin * iv];
        let gs = &gout.data()[s * g.cout * ov..(s + 1) * g.cout * ov];
        for (t, off) in kernel_taps(g.k) {
            let wm = Mat {
                rows: g.cout,
                cols: g.cin,
                row_stride: g.cin * kv,
                col_stride: kv,
            };
            if let Some(gw) = gw.as_mut() {
                gather_tap(xs, g.in_dims, g.cin, g.out_dims, off, stride, pad, &mut col);
                gemm(
                    gs,
                    Mat::row_major(g.cout, ov),
                    &col,
                    Mat::row_major(g.cin, ov).t(),
                    1.0,
                    &mut gw[t..],
                    wm,
                );
            }
            if let Some(gx) = gx.as_mut() {
                gemm(
                    &w.data()[t..],
                    wm.t(),
                    gs,
                    Mat::row_major(g.cout, ov),
                    0.0,
                    &mut col,
                    Mat::row_major(g.cin, ov),
                );
                let gxs = &mut gx[s * g.cin * iv..(s + 1) * g.cin * iv];
                scatter_tap(&col, gxs, g.in_dims, g.cin, g.out_dims, off, stride, pad);
            }
        }
    }
    Ok(ConvGrads {
        input: gx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("input grad shape")),
        weight: gw.map(|d| Tensor::new(w.shape().to_vec(), d).expect("weight grad shape")),
        bias: bias_grad(gout),
    })
}

fn conv_t_geom(x: &Tensor, w: &Tensor, stride: usize) -> Result<ConvGeom> {
    if stride == 0 {
        return Err(Error::config("conv_transpose3d stride must be at least 1"));
    }
    let xd = x.dims5()?;
    let wd = w.dims5()?;
    if wd[0] != xd[1] {
        return Err(Error::config(format!(
            "conv_transpose3d input has {} channels but the weight expects {}",
            xd[1], wd[0]
        )));
    }
    let k = [wd[2], wd[3], wd[4]];
    let in_dims = spatial(xd);
    let out_dims = [0, 1, 2].map(|a| (in_dims[a] - 1) * stride + k[a]);
    Ok(ConvGeom {
        n: xd[0],
        cin: xd[1],
        cout: wd[1],
        k,
        in_dims,
        out_dims,
    })
}

/// Transposed 3-D convolution without padding.
///
/// `x` is `[N, Cin, D, H, W]`, `w` is `[Cin, Cout, kd, kh, kw]`; each output
/// extent is `(in − 1)·stride + k`.
pub fn conv_transpose3d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    let g = conv_t_geom(x, w, stride)?;
    check_bias(b, g.cout)?;
    let iv = volume(g.in_dims);
    let ov = volume(g.out_dims);
    let kv = volume(g.k);
    let mut out = vec![0.0; g.n * g.cout * ov];
    let mut tmp = vec![0.0; g.cout * iv];
    for s in 0..g.n {
        let xs = &x.data()[s * g.cin * iv..(s + 1) * g.cin * iv];
        let os = &mut out[s * g.cout * ov..(s + 1) * g.cout * ov];
        for (t, off) in kernel_taps(g.k) {
            let wm = Mat {
                rows: g.cin,
                cols: g.cout,
                row_stride: g.cout * kv,
                col_stride: kv,
            };
            gemm(
                &w.data()[t..],
                wm.t(),
                xs,
                Mat::row_major(g.cin, iv),
                0.0,
                &mut tmp,
                Mat::row_major(g.cout, iv),
            );
            scatter_tap(&tmp, os, g.out_dims, g.cout, g.in_dims, off, stride, 0);
        }
    }
    add_bias(&mut out, b, g.n, g.cout, ov);
    let mut shape = vec![g.n, g.cout];
    shape.extend_from_slice(&g.out_dims);
    Tensor::new(shape, out)
}

/// Backward pass of [`conv_transpose3d`].
pub fn conv_transpose3d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    want_input: bool,
    want_weight: bool,
) -> Result<ConvGrads> {
    let g = conv_t_geom(x, w, stride)?;
    let iv = volume(g.in_dims);
    let ov = volume(g.out_dims);
    let kv = volume(g.k);
    let mut gx = want_input.then(|| vec![0.0; x.len()]);
    let mut gw = want_weight.then(|| vec![0.0; w.len()]);
    let mut col = vec![0.0; g.cout * iv];
    for s in 0..g.n {
        let xs = &x.data()[s * g.cin * iv..(s + 1) * g.cin * iv];
        let gs = &gout.data()[s * g.cout * ov..(s + 1) * g.cout * ov];
        for (t, off) in kernel_taps(g.k) {
            gather_tap(gs, g.out_dims, g.cout, g.in_dims, off, stride, 0, &mut col);
            let wm = Mat {
                rows: g.cin,
                cols: g.cout,
                row_stride: g.cout * kv,
                col_stride: kv,
            };
            if let Some(gx) = gx.as_mut() {
                gemm(
                    &w.data()[t..],
                    wm,
                    &col,
                    Mat::row_major(g.cout, iv),
                    1.0,
                    &mut gx[s * g.cin * iv..(s + 1) * g.cin * iv],
                    Mat::row_major(g.cin, iv),
                );
            }
            if let Some(gw) = gw.as_mut() {
                gemm(
                    xs,
                    Mat::row_major(g.cin, iv),
                    &col,
                    Mat::row_major(g.cout, iv).t(),
                    1.0,
                    &mut gw[t..],
                    wm,
                );
            }
        }
    }
    Ok(ConvGrads {
        input: gx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("input grad shape")),
        weight: gw.map(|d| Tensor::new(w.shape().to_vec(), d).expect("weight grad shape")),
        bias: bias_grad(gout),
    })
}

/// Max pooling. Returns the pooled tensor and, for each output value, the
/// flat input index it was taken from (first maximum in row-major window
/// order).
pub fn maxpool3d(x: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    if window == 0 || stride == 0 {
        return Err(Error::config("maxpool3d window and stride must be at least 1"));
    }
    let [n, c, d, h, w] = x.dims5()?;
    for (axis, &e) in [d, h, w].iter().enumerate() {
        if e % stride != 0 || e < window {
            return Err(Error::config(format!(
                "maxpool3d: spatial extent {e} on axis {axis} is not divisible by stride {stride}"
            )));
        }
    }
    let out_dims = [d, h, w].map(|e| (e - window) / stride + 1);
    let [od, oh, ow] = out_dims;
    let iv = d * h * w;
    let mut out = Vec::with_capacity(n * c * od * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * iv;
        for zd in 0..od {
            for zh in 0..oh {
                for zw in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for a in 0..window {
                        for b in 0..window {
                            for cc in 0..window {
                                let idx = base
                                    + ((zd * stride + a) * h + zh * stride + b) * w
                                    + zw * stride
                                    + cc;
                                let v = x.data()[idx];
                                if best_idx == usize::MAX || v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_idx);
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, c, od, oh, ow], out)?, arg))
}

pub fn maxpool3d_backward(input_shape: &[usize], argmax: &[usize], gout: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(input_shape);
    for (&idx, &v) in argmax.iter().zip(gout.data()) {
        g.data_mut()[idx] += v;
    }
    g
}

/// Sum over the cubic `window³` neighborhood of every voxel, with voxels
/// outside the volume contributing zero. Self-adjoint.
pub fn box_sum3d(x: &Tensor, window: usize) -> Result<Tensor> {
    if window % 2 == 0 {
        return Err(Error::config(format!("box window must be odd, got {window}")));
    }
    let [n, c, d, h, w] = x.dims5()?;
    let r = window / 2;
    let mut cur = x.data().to_vec();
    let mut next = vec![0.0; cur.len()];
    // Pass along w, then h, then d; each is a 1-D windowed sum on lines.
    for (len, step) in [(w, 1), (h, w), (d, h * w)] {
        let planes = n * c;
        let vol = d * h * w;
        for p in 0..planes {
            let base = p * vol;
            for start in 0..vol / len {
                let origin = base + (start / step) * len * step + start % step;
                for i in 0..len {
                    let lo = i.saturating_sub(r);
                    let hi = (i + r).min(len - 1);
                    let mut acc = 0.0;
                    for j in lo..=hi {
                        acc += cur[origin + j * step];
                    }
                    next[origin + i * step] = acc;
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Tensor::new(x.shape().to_vec(), cur)
}

/// Number of in-bounds voxels in each voxel's `window³` neighborhood.
pub fn box_counts(dims: [usize; 3], window: usize) -> Vec<f64> {
    let r = window / 2;
    let count = |i: usize, len: usize| ((i + r).min(len - 1) - i.saturating_sub(r) + 1) as f64;
    let [d, h, w] = dims;
    let mut out = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                out.push(count(z, d) * count(y, h) * count(x, w));
            }
        }
    }
    out
}

/// Forward difference `x[i + 1] − x[i]` along a spatial axis (2, 3 or 4).
pub fn diff(x: &Tensor, axis: usize) -> Result<Tensor> {
    let dims = x.dims5()?;
    if !(2..5).contains(&axis) || dims[axis] < 2 {
        return Err(Error::config(format!(
            "diff needs spatial axis 2..=4 with extent >= 2, got axis {axis} of {dims:?}"
        )));
    }
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let len = dims[axis];
    let mut out = Vec::with_capacity(outer * (len - 1) * inner);
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..len - 1 {
            for k in 0..inner {
                let a = base + i * inner + k;
                out.push(x.data()[a + inner] - x.data()[a]);
            }
        }
    }
    let mut shape = dims.to_vec();
    shape[axis] -= 1;
    Tensor::new(shape, out)
}

pub fn diff_backward(input_shape: &[usize], axis: usize, gout: &Tensor) -> Tensor {
    let inner: usize = input_shape[axis + 1..].iter().product();
    let outer: usize = input_shape[..axis].iter().product();
    let len = input_shape[axis];
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    let mut src = gout.data().iter();
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..len - 1 {
            for k in 0..inner {
                let v = *src.next().expect("gradient length");
                let a = base + i * inner + k;
                gd[a + inner] += v;
                gd[a] -= v;
            }
        }
    }
    g
}

/// Concatenates tensors along axis 1.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::config("concat needs at least one input"))?;
    if first.shape().len() < 2 {
        return Err(Error::config("concat needs tensors of rank >= 2"));
    }
    let n = first.shape()[0];
    let rest = &first.shape()[2..];
    let mut channels = 0;
    for p in parts {
        if p.shape().len() != first.shape().len() || p.shape()[0] != n || &p.shape()[2..] != rest {
            return Err(Error::config(format!(
                "concat: shape {:?} does not match {:?} outside the channel axis",
                p.shape(),
                first.shape()
            )));
        }
        channels += p.shape()[1];
    }
    let inner: usize = rest.iter().product();
    let mut out = Vec::with_capacity(n * channels * inner);
    for s in 0..n {
        for p in parts {
            let c = p.shape()[1];
            out.extend_from_slice(&p.data()[s * c * inner..(s + 1) * c * inner]);
        }
    }
    let mut shape = vec![n, channels];
    shape.extend_from_slice(rest);
    Tensor::new(shape, out)
}

/// Splits a channel-concatenated gradient back into per-input pieces.
pub fn split_channels(g: &Tensor, channels: &[usize]) -> Vec<Tensor> {
    let n = g.shape()[0];
    let total = g.shape()[1];
    let rest = &g.shape()[2..];
    let inner: usize = rest.iter().product();
    let mut offset = 0;
    channels
        .iter()
        .map(|&c| {
            let mut data = Vec::with_capacity(n * c * inner);
            for s in 0..n {
                let start = (s * total + offset) * inner;
                data.extend_from_slice(&g.data()[start..start + c * inner]);
            }
            offset += c;
            let mut shape = vec![n, c];
            shape.extend_from_slice(rest);
            Tensor::new(shape, data).expect("split shape")
        })
        .collect()
}

/// Linear interpolation setup along one axis with border clamping.
#[derive(Clone, Copy, Debug)]
struct AxisSample {
    i0: usize,
    i1: usize,
    t: f64,
    /// 1 when the coordinate is inside the volume, 0 when clamped.
    slope: f64,
}

fn axis_sample(coord: f64, len: usize) -> AxisSample {
    if len == 1 {
        return AxisSample {
            i0: 0,
            i1: 0,
            t: 0.0,
            slope: 0.0,
        };
    }
    let hi = (len - 1) as f64;
    let slope = if (0.0..=hi).contains(&coord) { 1.0 } else { 0.0 };
    let c = coord.clamp(0.0, hi);
    let i0 = (c.floor() as usize).min(len - 2);
    AxisSample {
        i0,
        i1: i0 + 1,
        t: c - i0 as f64,
        slope,
    }
}

#[derive(Clone, Copy)]
struct Trilinear {
    idx: [usize; 8],
    w: [f64; 8],
    /// Per-corner weight derivatives along d, h, w.
    dw: [[f64; 8]; 3],
}

fn trilinear(pos: [f64; 3], dims: [usize; 3]) -> Trilinear {
    let s = [0, 1, 2].map(|a| axis_sample(pos[a], dims[a]));
    let mut t = Trilinear {
        idx: [0; 8],
        w: [0.0; 8],
        dw: [[0.0; 8]; 3],
    };
    for corner in 0..8 {
        let bits = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
        let mut idx = [0usize; 3];
        let mut f = [0.0; 3];
        let mut df = [0.0; 3];
        for a in 0..3 {
            if bits[a] == 0 {
                idx[a] = s[a].i0;
                f[a] = 1.0 - s[a].t;
                df[a] = -s[a].slope;
            } else {
                idx[a] = s[a].i1;
                f[a] = s[a].t;
                df[a] = s[a].slope;
            }
        }
        t.idx[corner] = (idx[0] * dims[1] + idx[1]) * dims[2] + idx[2];
        t.w[corner] = f[0] * f[1] * f[2];
        t.dw[0][corner] = df[0] * f[1] * f[2];
        t.dw[1][corner] = f[0] * df[1] * f[2];
        t.dw[2][corner] = f[0] * f[1] * df[2];
    }
    t
}

fn check_warp_shapes(img: &Tensor, field: &Tensor) -> Result<([usize; 5], [usize; 3])> {
    let id = img.dims5().map_err(|e| Error::input(e.to_string()))?;
    let fd = field.dims5().map_err(|e| Error::input(e.to_string()))?;
    if fd[1] != 3 || fd[0] != id[0] || spatial(fd) != spatial(id) {
        return Err(Error::input(format!(
            "field shape {fd:?} does not match image shape {id:?} (expected [{}, 3, {}, {}, {}])",
            id[0], id[2], id[3], id[4]
        )));
    }
    Ok((id, spatial(id)))
}

fn sample_at(field: &[f64], v: usize, p: usize, dims: [usize; 3]) -> Trilinear {
    let w = dims[2];
    let h = dims[1];
    let coords = [(p / (h * w)) as f64, ((p / w) % h) as f64, (p % w) as f64];
    trilinear(
        [
            coords[0] + field[p],
            coords[1] + field[v + p],
            coords[2] + field[2 * v + p],
        ],
        dims,
    )
}

/// Samples `img` at `p + field(p)` with trilinear interpolation and border
/// clamping. Field channels are displacements along d, h, w in voxels.
pub fn warp(img: &Tensor, field: &Tensor) -> Result<Tensor> {
    let ([n, c, ..], dims) = check_warp_shapes(img, field)?;
    let v = volume(dims);
    let mut out = vec![0.0; img.len()];
    for s in 0..n {
        let fs = &field.data()[s * 3 * v..(s + 1) * 3 * v];
        for ch in 0..c {
            let src = &img.data()[(s * c + ch) * v..(s * c + ch + 1) * v];
            let dst = &mut out[(s * c + ch) * v..(s * c + ch + 1) * v];
            dst.par_chunks_mut(PAR_CHUNK)
                .enumerate()
                .for_each(|(chunk, dst)| {
                    for (k, o) in dst.iter_mut().enumerate() {
                        let t = sample_at(fs, v, chunk * PAR_CHUNK + k, dims);
                        let mut acc = 0.0;
                        for corner in 0..8 {
                            acc += t.w[corner] * src[t.idx[corner]];
                        }
                        *o = acc;
                    }
                });
        }
    }
    Tensor::new(img.shape().to_vec(), out)
}

/// Gradients of [`warp`] with respect to the image and the field.
pub fn warp_backward(
    img: &Tensor,
    field: &Tensor,
    gout: &Tensor,
    want_img: bool,
    want_field: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let ([n, c, ..], dims) = check_warp_shapes(img, field)?;
    let v = volume(dims);
    let mut gimg = want_img.then(|| vec![0.0; img.len()]);
    let mut gfield = want_field.then(|| vec![0.0; field.len()]);
    for s in 0..n {
        let fs = &field.data()[s * 3 * v..(s + 1) * 3 * v];
        if let Some(gimg) = gimg.as_mut() {
            for p in 0..v {
                let t = sample_at(fs, v, p, dims);
                for ch in 0..c {
                    let g = gout.data()[(s * c + ch) * v + p];
                    let gi = &mut gimg[(s * c + ch) * v..(s * c + ch + 1) * v];
                    for corner in 0..8 {
                        gi[t.idx[corner]] += t.w[corner] * g;
                    }
                }
            }
        }
        if let Some(gfield) = gfield.as_mut() {
            let gf = &mut gfield[s * 3 * v..(s + 1) * 3 * v];
            let (gd, rest) = gf.split_at_mut(v);
            let (gh, gw) = rest.split_at_mut(v);
            gd.par_chunks_mut(PAR_CHUNK)
                .zip(gh.par_chunks_mut(PAR_CHUNK))
                .zip(gw.par_chunks_mut(PAR_CHUNK))
                .enumerate()
                .for_each(|(chunk, ((gd, gh), gw))| {
                    for k in 0..gd.len() {
                        let p = chunk * PAR_CHUNK + k;
                        let t = sample_at(fs, v, p, dims);
                        let mut acc = [0.0; 3];
                        for ch in 0..c {
                            let src = &img.data()[(s * c + ch) * v..(s * c + ch + 1) * v];
                            let g = gout.data()[(s * c + ch) * v + p];
                            for (a, acc) in acc.iter_mut().enumerate() {
                                let mut dv = 0.0;
                                for corner in 0..8 {
                                    dv += t.dw[a][corner] * src[t.idx[corner]];
                                }
                                *acc += g * dv;
                            }
                        }
                        gd[k] = acc[0];
                        gh[k] = acc[1];
                        gw[k] = acc[2];
                    }
                });
        }
    }
    Ok((
        gimg.map(|d| Tensor::new(img.shape().to_vec(), d).expect("image grad shape")),
        gfield.map(|d| Tensor::new(field.shape().to_vec(), d).expect("field grad shape")),
    ))
}

/// Nearest-neighbour sampling at `p + field(p)` with border clamping, for
/// categorical data. `values` is one `[D, H, W]` grid, `field` is `[3, D, H, W]`.
pub fn warp_nearest<T: Copy>(values: &[T], dims: [usize; 3], field: &[f64]) -> Vec<T> {
    let v = volume(dims);
    let [d, h, w] = dims;
    (0..v)
        .map(|p| {
            let base = [p / (h * w), (p / w) % h, p % w];
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let c = base[a] as f64 + field[a * v + p];
                let hi = [d, h, w][a] - 1;
                idx[a] = c.round().clamp(0.0, hi as f64) as usize;
            }
            values[(idx[0] * h + idx[1]) * w + idx[2]]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t5(shape: [usize; 5], f: impl FnMut(usize) -> f64) -> Tensor {
        Tensor::from_fn(&shape, f)
    }

    /// Direct nested-loop convolution used as an independent oracle.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
        let [n, cin, d, h, ww] = x.dims5().unwrap();
        let [cout, _, kd, kh, kw] = w.dims5().unwrap();
        let o = |e: usize, k: usize| (e + 2 * pad - k) / stride + 1;
        let (od, oh, ow) = (o(d, kd), o(h, kh), o(ww, kw));
        let mut out = Tensor::zeros(&[n, cout, od, oh, ow]);
        for s in 0..n {
            for co in 0..cout {
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = b[co];
                            for ci in 0..cin {
                                for a in 0..kd {
                                    for bb in 0..kh {
                                        for c in 0..kw {
                                            let iz = (z * stride + a) as isize - pad as isize;
                                            let iy = (y * stride + bb) as isize - pad as isize;
                                            let ix = (xx * stride + c) as isize - pad as isize;
                                            if iz < 0
                                                || iy < 0
                                                || ix < 0
                                                || iz >= d as isize
                                                || iy >= h as isize
                                                || ix >= ww as isize
                                            {
                                                continue;
                                            }
                                            let xi = (((s * cin + ci) * d + iz as usize) * h
                                                + iy as usize)
                                                * ww
                                                + ix as usize;
                                            let wi = (((co * cin + ci) * kd + a) * kh + bb) * kw + c;
                                            acc += x.data()[xi] * w.data()[wi];
                                        }
                                    }
                                }
                            }
                            let oi = (((s * cout + co) * od + z) * oh + y) * ow + xx;
                            out.data_mut()[oi] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    fn pseudo(i: usize) -> f64 {
        ((i * 7919 + 13) % 101) as f64 / 50.0 - 1.0
    }

    #[test]
    fn conv_all_ones_center_and_corner() {
        let x = Tensor::full(&[1, 1, 4, 4, 4], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3, 3], 1.0);
        let y = conv3d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4, 4]);
        // (1,1,1) has a full 3x3x3 neighbourhood; (0,0,0) sees 2x2x2.
        assert_eq!(y.data()[(4 + 1) * 4 + 1 + 16], 27.0);
        assert_eq!(y.data()[0], 8.0);
    }

    #[test]
    fn conv_zero_kernel_annihilates() {
        let x = t5([1, 2, 4, 4, 4], pseudo);
        let w = Tensor::zeros(&[3, 2, 3, 3, 3]);
        let y = conv3d(&x, &w, Some(&Tensor::zeros(&[3])), 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_loop_oracle() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 0, 2), (2, 1, 3), (1, 0, 1)] {
            let x = t5([2, 3, 5, 6, 4], pseudo);
            let w = t5([4, 3, k, k, k], |i| pseudo(i + 11));
            let b = [0.1, -0.2, 0.3, 0.0];
            let bt = Tensor::new(vec![4], b.to_vec()).unwrap();
            let got = conv3d(&x, &w, Some(&bt), stride, pad).unwrap();
            let want = conv_oracle(&x, &w, &b, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3, 3]);
        assert!(matches!(conv3d(&x, &w, None, 1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn conv_transpose_scatters_single_voxel() {
        let x = Tensor::full(&[1, 1, 1, 1, 1], 2.5);
        let w = Tensor::full(&[1, 1, 2, 2, 2], 1.0);
        let y = conv_transpose3d(&x, &w, None, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 2.5));
        let z = conv_transpose3d(&Tensor::zeros(&[1, 1, 3, 3, 3]), &w, None, 2).unwrap();
        assert_eq!(z.shape(), &[1, 1, 6, 6, 6]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        for &(stride, k) in &[(1, 3), (2, 2), (2, 3)] {
            let d = 4 + (k - stride) % stride.max(1);
            let dims = [d, d, d];
            let x = t5([1, 2, dims[0], dims[1], dims[2]], |i| pseudo(3 * i + 1));
            let w = t5([3, 2, k, k, k], |i| pseudo(5 * i + 2));
            let y = conv3d(&x, &w, None, stride, 0).unwrap();
            let ys = y.dims5().unwrap();
            let r = t5(ys, |i| pseudo(7 * i + 3));
            let back = conv_transpose3d(&r, &w, None, stride).unwrap();
            assert_eq!(back.shape(), x.shape());
            let lhs = y.dot(&r);
            let rhs = x.dot(&back);
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn maxpool_block_and_tie_break() {
        let x = t5([1, 1, 2, 2, 2], |i| (i + 1) as f64);
        let (y, arg) = maxpool3d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[8.0]);
        assert_eq!(arg, vec![7]);
        let c = Tensor::full(&[1, 1, 4, 4, 4], 0.7);
        let (y, arg) = maxpool3d(&c, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.7));
        assert_eq!(arg[0], 0, "ties resolve to the first voxel in scan order");
        assert!(maxpool3d(&Tensor::zeros(&[1, 1, 3, 4, 4]), 2, 2).is_err());
    }

    #[test]
    fn box_sum_matches_direct_neighbourhood_sum() {
        let x = t5([1, 1, 5, 4, 6], pseudo);
        let y = box_sum3d(&x, 3).unwrap();
        let (d, h, w) = (5usize, 4usize, 6usize);
        for z in 0..d {
            for yy in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for a in z.saturating_sub(1)..=(z + 1).min(d - 1) {
                        for b in yy.saturating_sub(1)..=(yy + 1).min(h - 1) {
                            for c in xx.saturating_sub(1)..=(xx + 1).min(w - 1) {
                                acc += x.data()[(a * h + b) * w + c];
                            }
                        }
                    }
                    let got = y.data()[(z * h + yy) * w + xx];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
        let counts = box_counts([d, h, w], 3);
        assert_eq!(counts[0], 8.0);
        assert_eq!(counts[(h + 1) * w + 1 + h * w], 27.0);
    }

    #[test]
    fn diff_and_adjoint() {
        let x = t5([1, 3, 4, 3, 2], pseudo);
        for axis in 2..5 {
            let y = diff(&x, axis).unwrap();
            let r = Tensor::from_fn(y.shape(), |i| pseudo(i + 5));
            let back = diff_backward(x.shape(), axis, &r);
            assert!((y.dot(&r) - x.dot(&back)).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_and_split_shapes() {
        let a = Tensor::zeros(&[1, 2, 2, 2, 2]);
        let b = Tensor::full(&[1, 3, 2, 2, 2], 1.0);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[1, 5, 2, 2, 2]);
        let parts = split_channels(&c, &[2, 3]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        let bad = Tensor::zeros(&[1, 1, 2, 2, 3]);
        assert!(concat_channels(&[&a, &bad]).is_err());
    }

    #[test]
    fn warp_zero_field_is_identity() {
        let img = t5([1, 2, 3, 4, 5], pseudo);
        let field = Tensor::zeros(&[1, 3, 3, 4, 5]);
        assert_eq!(warp(&img, &field).unwrap(), img);
    }

    #[test]
    fn warp_nearest_integer_shift() {
        let dims = [3, 2, 2];
        let vals: Vec<u32> = (0..12).collect();
        let mut field = vec![0.0; 36];
        field[..12].fill(1.0);
        let out = warp_nearest(&vals, dims, &field);
        for z in 0..3 {
            for p in 0..4 {
                let src = (z + 1).min(2);
                assert_eq!(out[z * 4 + p], vals[src * 4 + p]);
            }
        }
    }
}
