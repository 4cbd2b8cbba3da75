//! Raw numeric kernels behind the autodiff graph.
//!
//! Convolution is expressed as three mutually-adjoint bilinear maps:
//! the forward correlation, its input adjoint (also used as transposed
//! convolution) and its weight adjoint. Each one's derivative is another
//! member of the trio, which is what lets the graph differentiate twice.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::{numel, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvCfg {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvCfg {
    pub fn new(stride: usize, pad: usize, dilation: usize) -> Self {
        ConvCfg {
            stride,
            pad,
            dilation,
        }
    }

    /// Output length along one axis, or `None` when the kernel does not fit.
    pub fn out_len(&self, len: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        if len + 2 * self.pad < span {
            return None;
        }
        Some((len + 2 * self.pad - span) / self.stride + 1)
    }

    /// Output length of the transposed map applied to `len`.
    pub fn transposed_len(&self, len: usize, k: usize) -> Option<usize> {
        let full = (len.checked_sub(1)?) * self.stride + self.dilation * (k - 1) + 1;
        full.checked_sub(2 * self.pad)
    }

    /// Output positions `o` in `lo..hi` whose tap `kidx` lands inside `0..in_len`.
    fn valid(&self, out_len: usize, in_len: usize, kidx: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let offset = (kidx * self.dilation) as isize - self.pad as isize;
        let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
        let room = in_len as isize - offset;
        let hi = if room <= 0 { 0 } else { ((room - 1) / s + 1).min(out_len as isize) };
        (lo as usize, (hi.max(lo)) as usize)
    }

    #[inline]
    fn src(&self, o: usize, kidx: usize) -> usize {
        o * self.stride + kidx * self.dilation - self.pad
    }
}

/// `y[n,o] = sum_c x[n,c] (*) w[o,c]` (cross-correlation, no bias).
pub fn conv2d(exec: Exec, x: &Tensor, w: &Tensor, cfg: ConvCfg) -> Result<Tensor> {
    let [n, c, h, wd] = x.shape();
    let [o, wc, kh, kw] = w.shape();
    if wc != c {
        return Err(Error::Shape(format!(
            "conv weight expects {wc} input channels, got {c}"
        )));
    }
    let (oh, ow) = match (cfg.out_len(h, kh), cfg.out_len(wd, kw)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::Shape(format!(
                "conv kernel {kh}x{kw} does not fit input {h}x{wd}"
            )))
        }
    };
    let mut out = vec![0.0; n * o * oh * ow];
    let (xd, wdat) = (x.data(), w.data());
    exec.for_each_chunk(&mut out, oh * ow, |idx, plane| {
        let (b, oc) = (idx / o, idx % o);
        for ic in 0..c {
            let xp = &xd[(b * c + ic) * h * wd..(b * c + ic + 1) * h * wd];
            for ky in 0..kh {
                let (ylo, yhi) = cfg.valid(oh, h, ky);
                for kx in 0..kw {
                    let wv = wdat[((oc * c + ic) * kh + ky) * kw + kx];
                    let (xlo, xhi) = cfg.valid(ow, wd, kx);
                    for oy in ylo..yhi {
                        let row = &xp[cfg.src(oy, ky) * wd..];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        for ox in xlo..xhi {
                            orow[ox] += wv * row[cfg.src(ox, kx)];
                        }
                    }
                }
            }
        }
    });
    Ok(Tensor::from_parts([n, o, oh, ow], out))
}

/// Adjoint of [`conv2d`] in its input: maps `gy: [n, o, oh, ow]` back to
/// `[n, c, in_hw.0, in_hw.1]`. With the weight read as `[in, out, k, k]`
/// this is a transposed convolution.
pub fn conv2d_input_grad(
    exec: Exec,
    gy: &Tensor,
    w: &Tensor,
    cfg: ConvCfg,
    in_hw: (usize, usize),
) -> Result<Tensor> {
    let [n, o, oh, ow] = gy.shape();
    let [wo, c, kh, kw] = w.shape();
    let (h, wd) = in_hw;
    if wo != o {
        return Err(Error::Shape(format!(
            "transposed conv weight expects {wo} input channels, got {o}"
        )));
    }
    if cfg.out_len(h, kh) != Some(oh) || cfg.out_len(wd, kw) != Some(ow) {
        return Err(Error::Shape(format!(
            "transposed conv: {oh}x{ow} is not the image of {h}x{wd} under kernel {kh}x{kw}"
        )));
    }
    let mut out = vec![0.0; n * c * h * wd];
    let (gd, wdat) = (gy.data(), w.data());
    exec.for_each_chunk(&mut out, h * wd, |idx, plane| {
        let (b, ic) = (idx / c, idx % c);
        for oc in 0..o {
            let gp = &gd[(b * o + oc) * oh * ow..(b * o + oc + 1) * oh * ow];
            for ky in 0..kh {
                let (ylo, yhi) = cfg.valid(oh, h, ky);
                for kx in 0..kw {
                    let wv = wdat[((oc * c + ic) * kh + ky) * kw + kx];
                    let (xlo, xhi) = cfg.valid(ow, wd, kx);
                    for oy in ylo..yhi {
                        let prow = &mut plane[cfg.src(oy, ky) * wd..];
                        let grow = &gp[oy * ow..(oy + 1) * ow];
                        for ox in xlo..xhi {
                            prow[cfg.src(ox, kx)] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    });
    Ok(Tensor::from_parts([n, c, h, wd], out))
}

/// Adjoint of [`conv2d`] in its weight: `[o, c, k.0, k.1]`.
pub fn conv2d_weight_grad(
    exec: Exec,
    x: &Tensor,
    gy: &Tensor,
    cfg: ConvCfg,
    k: (usize, usize),
) -> Result<Tensor> {
    let [n, c, h, wd] = x.shape();
    let [gn, o, oh, ow] = gy.shape();
    let (kh, kw) = k;
    if gn != n || cfg.out_len(h, kh) != Some(oh) || cfg.out_len(wd, kw) != Some(ow) {
        return Err(Error::Shape(format!(
            "weight grad: input {:?} and output grad {:?} disagree",
            x.shape(),
            gy.shape()
        )));
    }
    let mut out = vec![0.0; o * c * kh * kw];
    let (xd, gd) = (x.data(), gy.data());
    exec.for_each_chunk(&mut out, c * kh * kw, |oc, block| {
        for ic in 0..c {
            for ky in 0..kh {
                let (ylo, yhi) = cfg.valid(oh, h, ky);
                for kx in 0..kw {
                    let (xlo, xhi) = cfg.valid(ow, wd, kx);
                    let mut acc = 0.0;
                    for b in 0..n {
                        let xp = &xd[(b * c + ic) * h * wd..(b * c + ic + 1) * h * wd];
                        let gp = &gd[(b * o + oc) * oh * ow..(b * o + oc + 1) * oh * ow];
                        for oy in ylo..yhi {
                            let xrow = &xp[cfg.src(oy, ky) * wd..];
                            let grow = &gp[oy * ow..(oy + 1) * ow];
                            for ox in xlo..xhi {
                                acc += grow[ox] * xrow[cfg.src(ox, kx)];
                            }
                        }
                    }
                    block[(ic * kh + ky) * kw + kx] = acc;
                }
            }
        }
    });
    Ok(Tensor::from_parts([o, c, kh, kw], out))
}

/// 2x2 average pooling with stride 2. Requires even spatial dims.
pub fn avg_pool2(exec: Exec, x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("avg_pool2 needs even dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    let xd = x.data();
    exec.for_each_chunk(&mut out, oh * ow, |p, plane| {
        let src = &xd[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                plane[y * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    });
    Ok(Tensor::from_parts([n, c, oh, ow], out))
}

/// Adjoint of [`avg_pool2`]: spreads each value over its 2x2 block, times 1/4.
pub fn avg_unpool2(exec: Exec, g: &Tensor) -> Tensor {
    let [n, c, h, w] = g.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * oh * ow];
    let gd = g.data();
    exec.for_each_chunk(&mut out, oh * ow, |p, plane| {
        let src = &gd[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                plane[y * ow + x] = 0.25 * src[(y / 2) * w + x / 2];
            }
        }
    });
    Tensor::from_parts([n, c, oh, ow], out)
}

/// `out[i] = x[idx[i]]`.
pub fn gather(x: &Tensor, idx: &[usize], out_shape: Shape) -> Tensor {
    let xd = x.data();
    Tensor::from_parts(out_shape, idx.iter().map(|&i| xd[i]).collect())
}

/// Adjoint of [`gather`]: `out[idx[i]] += g[i]`.
pub fn scatter_add(g: &Tensor, idx: &[usize], out_shape: Shape) -> Tensor {
    let mut out = vec![0.0; numel(out_shape)];
    for (&i, &v) in idx.iter().zip(g.data()) {
        out[i] += v;
    }
    Tensor::from_parts(out_shape, out)
}

/// Index map for nearest-neighbour 2x upsampling.
pub fn upsample2_index(shape: Shape) -> (Vec<usize>, Shape) {
    let [n, c, h, w] = shape;
    let (oh, ow) = (2 * h, 2 * w);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        for y in 0..oh {
            for x in 0..ow {
                idx.push(p * h * w + (y / 2) * w + x / 2);
            }
        }
    }
    (idx, [n, c, oh, ow])
}

/// Argmax indices for 2x2 max pooling (first maximum wins on ties).
pub fn max_pool2_index(x: &Tensor) -> Result<(Vec<usize>, Shape)> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("max_pool2 needs even dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                let base = p * h * w + 2 * y * w + 2 * xx;
                let cands = [base, base + 1, base + w, base + w + 1];
                let mut best = cands[0];
                for &i in &cands[1..] {
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                idx.push(best);
            }
        }
    }
    Ok((idx, [n, c, oh, ow]))
}

/// Whether `from` broadcasts to `to` (each axis equal or 1).
pub fn broadcastable(from: Shape, to: Shape) -> bool {
    from.iter().zip(&to).all(|(&a, &b)| a == b || a == 1)
}

pub fn broadcast(x: &Tensor, to: Shape) -> Result<Tensor> {
    let from = x.shape();
    if !broadcastable(from, to) {
        return Err(Error::Shape(format!("cannot broadcast {from:?} to {to:?}")));
    }
    if from == to {
        return Ok(x.clone());
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(numel(to));
    for a in 0..to[0] {
        let a0 = if from[0] == 1 { 0 } else { a };
        for b in 0..to[1] {
            let b0 = if from[1] == 1 { 0 } else { b };
            for c in 0..to[2] {
                let c0 = if from[2] == 1 { 0 } else { c };
                let row = ((a0 * from[1] + b0) * from[2] + c0) * from[3];
                if from[3] == 1 {
                    out.extend(std::iter::repeat_n(xd[row], to[3]));
                } else {
                    out.extend_from_slice(&xd[row..row + to[3]]);
                }
            }
        }
    }
    Ok(Tensor::from_parts(to, out))
}

/// Adjoint of [`broadcast`]: sums over every axis where `to` has length 1.
pub fn sum_to(x: &Tensor, to: Shape) -> Result<Tensor> {
    let from = x.shape();
    if !broadcastable(to, from) {
        return Err(Error::Shape(format!("cannot reduce {from:?} to {to:?}")));
    }
    if from == to {
        return Ok(x.clone());
    }
    let mut out = vec![0.0; numel(to)];
    let xd = x.data();
    let mut i = 0;
    for a in 0..from[0] {
        let a0 = if to[0] == 1 { 0 } else { a };
        for b in 0..from[1] {
            let b0 = if to[1] == 1 { 0 } else { b };
            for c in 0..from[2] {
                let c0 = if to[2] == 1 { 0 } else { c };
                let row = ((a0 * to[1] + b0) * to[2] + c0) * to[3];
                for d in 0..from[3] {
                    let d0 = if to[3] == 1 { 0 } else { d };
                    out[row + d0] += xd[i];
                    i += 1;
                }
            }
        }
    }
    Ok(Tensor::from_parts(to, out))
}

/// Concatenates along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidInput("concat of zero tensors".into()))?;
    let [n, _, h, w] = first.shape();
    for p in parts {
        let [pn, _, ph, pw] = p.shape();
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::Shape(format!(
                "concat: {:?} vs {:?}",
                p.shape(),
                first.shape()
            )));
        }
    }
    let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for p in parts {
            let c = p.shape()[1];
            out.extend_from_slice(&p.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    Ok(Tensor::from_parts([n, total, h, w], out))
}

/// Channels `start..start + len`.
pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if start + len > c {
        return Err(Error::Shape(format!(
            "channel slice {start}..{} out of {c}",
            start + len
        )));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * len * plane);
    for b in 0..n {
        let base = (b * c + start) * plane;
        out.extend_from_slice(&x.data()[base..base + len * plane]);
    }
    Ok(Tensor::from_parts([n, len, h, w], out))
}

/// Adjoint of [`slice_channels`]: zero-pads to `total` channels.
pub fn pad_channels(x: &Tensor, start: usize, total: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let plane = h * w;
    let mut out = vec![0.0; n * total * plane];
    for b in 0..n {
        let dst = (b * total + start) * plane;
        out[dst..dst + c * plane].copy_from_slice(&x.data()[b * c * plane..(b + 1) * c * plane]);
    }
    Tensor::from_parts([n, total, h, w], out)
}
