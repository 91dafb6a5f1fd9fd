//! Raw CPU kernels behind the differentiable ops.
//!
//! Every kernel is written in gather form: each output element is an
//! independent sum with a fixed accumulation order, so parallelizing over
//! output rows cannot change results. Channel-reductions that feed statistics
//! (batch-norm, biases) accumulate in f64 sequentially for the same reason.

use rayon::prelude::*;

use super::{Padding, Real, Shape};
use crate::error::{Error, Result};

/// Output spatial dims and padding for a convolution.
/// Same: pad = (k-1)/2, out = ceil(in/stride). Valid: pad = 0,
/// out = (in-k)/stride + 1.
pub(crate) fn conv_out_dims(
    xs: Shape,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize, usize, usize)> {
    let (h, w) = (xs.h(), xs.w());
    match padding {
        Padding::Same => {
            let oh = h.div_ceil(stride);
            let ow = w.div_ceil(stride);
            Ok((oh, ow, (kh - 1) / 2, (kw - 1) / 2))
        }
        Padding::Valid => {
            if h < kh || w < kw {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("valid padding: input {h}x{w} smaller than kernel {kh}x{kw}"),
                });
            }
            Ok(((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0))
        }
    }
}

/// Run `body(row_index, row)` over `out` split into rows of `row_len`,
/// in parallel when the buffer is big enough to pay for it.
fn for_each_row(out: &mut [Real], row_len: usize, body: impl Fn(usize, &mut [Real]) + Sync) {
    if out.len() >= 1 << 14 {
        out.par_chunks_mut(row_len).enumerate().for_each(|(r, row)| body(r, row));
    } else {
        out.chunks_mut(row_len).enumerate().for_each(|(r, row)| body(r, row));
    }
}

#[derive(Clone, Copy)]
pub(crate) struct ConvGeom {
    pub stride: usize,
    pub pad_y: usize,
    pub pad_x: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv2d_forward(
    x: &[Real],
    xs: Shape,
    k: &[Real],
    ks: Shape,
    bias: Option<&[Real]>,
    g: &ConvGeom,
) -> Vec<Real> {
    let [kh, kw, ci, co] = ks.dims();
    let (h, w) = (xs.h(), xs.w());
    let (oh, ow) = (g.oh, g.ow);
    let mut out = vec![0.0; xs.n() * oh * ow * co];
    for_each_row(&mut out, ow * co, |r, row| {
        let (b, oy) = (r / oh, r % oh);
        for ox in 0..ow {
            let acc = &mut row[ox * co..(ox + 1) * co];
            if let Some(bias) = bias {
                acc.copy_from_slice(bias);
            }
            for ky in 0..kh {
                let iy = (oy * g.stride + ky) as isize - g.pad_y as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad_x as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xb = xs.index(b, iy as usize, ix as usize, 0);
                    let kb = (ky * kw + kx) * ci * co;
                    for c_i in 0..ci {
                        let xv = x[xb + c_i];
                        if xv != 0.0 {
                            let krow = &k[kb + c_i * co..kb + (c_i + 1) * co];
                            for (a, &kv) in acc.iter_mut().zip(krow) {
                                *a += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn conv2d_backward_input(
    dy: &[Real],
    k: &[Real],
    ks: Shape,
    xs: Shape,
    g: &ConvGeom,
) -> Vec<Real> {
    let [kh, kw, ci, co] = ks.dims();
    let (h, w) = (xs.h(), xs.w());
    let (oh, ow) = (g.oh, g.ow);
    let s = g.stride as isize;
    let mut dx = vec![0.0; xs.count()];
    for_each_row(&mut dx, w * ci, |r, row| {
        let (b, iy) = (r / h, r % h);
        for ix in 0..w {
            let acc = &mut row[ix * ci..(ix + 1) * ci];
            for ky in 0..kh {
                let t = iy as isize + g.pad_y as isize - ky as isize;
                if t < 0 || t % s != 0 {
                    continue;
                }
                let oy = (t / s) as usize;
                if oy >= oh {
                    continue;
                }
                for kx in 0..kw {
                    let u = ix as isize + g.pad_x as isize - kx as isize;
                    if u < 0 || u % s != 0 {
                        continue;
                    }
                    let ox = (u / s) as usize;
                    if ox >= ow {
                        continue;
                    }
                    let dyb = ((b * oh + oy) * ow + ox) * co;
                    let kb = (ky * kw + kx) * ci * co;
                    for (c_i, a) in acc.iter_mut().enumerate() {
                        let krow = &k[kb + c_i * co..kb + (c_i + 1) * co];
                        let mut dot = 0.0;
                        for (dv, kv) in dy[dyb..dyb + co].iter().zip(krow) {
                            dot += dv * kv;
                        }
                        *a += dot;
                    }
                }
            }
        }
    });
    dx
}

pub(crate) fn conv2d_backward_kernel(
    x: &[Real],
    xs: Shape,
    dy: &[Real],
    ks: Shape,
    g: &ConvGeom,
) -> Vec<Real> {
    let [_kh, kw, ci, co] = ks.dims();
    let (h, w) = (xs.h(), xs.w());
    let (oh, ow) = (g.oh, g.ow);
    let mut dk = vec![0.0; ks.count()];
    let tap_len = ci * co;
    // Each (ky, kx) owns a disjoint slice of dk.
    let body = |tap: usize, dtap: &mut [Real]| {
        let (ky, kx) = (tap / kw, tap % kw);
        for b in 0..xs.n() {
            for oy in 0..oh {
                let iy = (oy * g.stride + ky) as isize - g.pad_y as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for ox in 0..ow {
                    let ix = (ox * g.stride + kx) as isize - g.pad_x as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xb = xs.index(b, iy as usize, ix as usize, 0);
                    let dyb = ((b * oh + oy) * ow + ox) * co;
                    for c_i in 0..ci {
                        let xv = x[xb + c_i];
                        if xv != 0.0 {
                            let drow = &mut dtap[c_i * co..(c_i + 1) * co];
                            for (d, &dv) in drow.iter_mut().zip(&dy[dyb..dyb + co]) {
                                *d += xv * dv;
                            }
                        }
                    }
                }
            }
        }
    };
    if dy.len() >= 1 << 14 {
        dk.par_chunks_mut(tap_len).enumerate().for_each(|(t, s)| body(t, s));
    } else {
        dk.chunks_mut(tap_len).enumerate().for_each(|(t, s)| body(t, s));
    }
    dk
}

/// Sum of dy over (n, h, w) per output channel.
pub(crate) fn reduce_bias_grad(dy: &[Real], co: usize) -> Vec<Real> {
    let mut acc = vec![0.0f64; co];
    for fiber in dy.chunks_exact(co) {
        for (a, &v) in acc.iter_mut().zip(fiber) {
            *a += v as f64;
        }
    }
    acc.into_iter().map(|v| v as Real).collect()
}

pub(crate) fn depthwise_forward(
    x: &[Real],
    xs: Shape,
    k: &[Real],
    kh: usize,
    kw: usize,
    g: &ConvGeom,
) -> Vec<Real> {
    let c = xs.c();
    let (h, w) = (xs.h(), xs.w());
    let (oh, ow) = (g.oh, g.ow);
    let mut out = vec![0.0; xs.n() * oh * ow * c];
    for_each_row(&mut out, ow * c, |r, row| {
        let (b, oy) = (r / oh, r % oh);
        for ox in 0..ow {
            let acc = &mut row[ox * c..(ox + 1) * c];
            for ky in 0..kh {
                let iy = (oy * g.stride + ky) as isize - g.pad_y as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad_x as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xb = xs.index(b, iy as usize, ix as usize, 0);
                    let kb = (ky * kw + kx) * c;
                    for (ch, a) in acc.iter_mut().enumerate() {
                        *a += x[xb + ch] * k[kb + ch];
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn depthwise_backward_input(
    dy: &[Real],
    k: &[Real],
    kh: usize,
    kw: usize,
    xs: Shape,
    g: &ConvGeom,
) -> Vec<Real> {
    let c = xs.c();
    let (h, w) = (xs.h(), xs.w());
    let (oh, ow) = (g.oh, g.ow);
    let s = g.stride as isize;
    let mut dx = vec![0.0; xs.count()];
    for_each_row(&mut dx, w * c, |r, row| {
        let (b, iy) = (r / h, r % h);
        for ix in 0..w {
            let acc = &mut row[ix * c..(ix + 1) * c];
            for ky in 0..kh {
                let t = iy as isize + g.pad_y as isize - ky as isize;
                if t < 0 || t % s != 0 {
                    continue;
                }
                let oy = (t / s) as usize;
                if oy >= oh {
                    continue;
                }
                for kx in 0..kw {
                    let u = ix as isize + g.pad_x as isize - kx as isize;
                    if u < 0 || u % s != 0 {
                        continue;
                    }
                    let ox = (u / s) as usize;
                    if ox >= ow {
                        continue;
                    }
                    let dyb = ((b * oh + oy) * ow + ox) * c;
                    let kb = (ky * kw + kx) * c;
                    for (ch, a) in acc.iter_mut().enumerate() {
                        *a += dy[dyb + ch] * k[kb + ch];
                    }
                }
            }
        }
    });
    dx
}

pub(crate) fn depthwise_backward_kernel(
    x: &[Real],
    xs: Shape,
    dy: &[Real],
    kh: usize,
    kw: usize,
    g: &ConvGeom,
) -> Vec<Real> {
    let c = xs.c();
    let (h, w) = (xs.h(), xs.w());
    let (oh, ow) = (g.oh, g.ow);
    let mut dk = vec![0.0; kh * kw * c];
    let body = |tap: usize, dtap: &mut [Real]| {
        let (ky, kx) = (tap / kw, tap % kw);
        for b in 0..xs.n() {
            for oy in 0..oh {
                let iy = (oy * g.stride + ky) as isize - g.pad_y as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for ox in 0..ow {
                    let ix = (ox * g.stride + kx) as isize - g.pad_x as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xb = xs.index(b, iy as usize, ix as usize, 0);
                    let dyb = ((b * oh + oy) * ow + ox) * c;
                    for (ch, d) in dtap.iter_mut().enumerate() {
                        *d += x[xb + ch] * dy[dyb + ch];
                    }
                }
            }
        }
    };
    if dy.len() >= 1 << 14 {
        dk.par_chunks_mut(c).enumerate().for_each(|(t, s)| body(t, s));
    } else {
        dk.chunks_mut(c).enumerate().for_each(|(t, s)| body(t, s));
    }
    dk
}

/// Transposed convolution, adjoint of a stride-`s` same-padded convolution.
/// Kernel layout (kh, kw, c_out, c_in) shares bytes with the forward conv's
/// (kh, kw, c_in, c_out), which is what makes <conv(x), y> = <x, deconv(y)>
/// hold with one tensor. Offset (k-1)/2; output dims are input dims * s.
pub(crate) fn deconv_forward(x: &[Real], xs: Shape, k: &[Real], ks: Shape, stride: usize) -> Vec<Real> {
    let [kh, kw, ca, cb] = ks.dims();
    let (h, w) = (xs.h(), xs.w());
    let (oh, ow) = (h * stride, w * stride);
    let (pt_y, pt_x) = ((kh - 1) / 2, (kw - 1) / 2);
    let s = stride as isize;
    let mut out = vec![0.0; xs.n() * oh * ow * ca];
    for_each_row(&mut out, ow * ca, |r, row| {
        let (b, oy) = (r / oh, r % oh);
        for ox in 0..ow {
            let acc = &mut row[ox * ca..(ox + 1) * ca];
            for ky in 0..kh {
                let t = oy as isize + pt_y as isize - ky as isize;
                if t < 0 || t % s != 0 {
                    continue;
                }
                let iy = (t / s) as usize;
                if iy >= h {
                    continue;
                }
                for kx in 0..kw {
                    let u = ox as isize + pt_x as isize - kx as isize;
                    if u < 0 || u % s != 0 {
                        continue;
                    }
                    let ix = (u / s) as usize;
                    if ix >= w {
                        continue;
                    }
                    let xb = xs.index(b, iy, ix, 0);
                    let kb = (ky * kw + kx) * ca * cb;
                    for (a_i, a) in acc.iter_mut().enumerate() {
                        let krow = &k[kb + a_i * cb..kb + (a_i + 1) * cb];
                        let mut dot = 0.0;
                        for (xv, kv) in x[xb..xb + cb].iter().zip(krow) {
                            dot += xv * kv;
                        }
                        *a += dot;
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn deconv_backward_input(dy: &[Real], k: &[Real], ks: Shape, xs: Shape, stride: usize) -> Vec<Real> {
    let [kh, kw, ca, cb] = ks.dims();
    let (h, w) = (xs.h(), xs.w());
    let (oh, ow) = (h * stride, w * stride);
    let (pt_y, pt_x) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut dx = vec![0.0; xs.count()];
    for_each_row(&mut dx, w * cb, |r, row| {
        let (b, iy) = (r / h, r % h);
        for ix in 0..w {
            let acc = &mut row[ix * cb..(ix + 1) * cb];
            for ky in 0..kh {
                let oy = (iy * stride + ky) as isize - pt_y as isize;
                if oy < 0 || oy >= oh as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ox = (ix * stride + kx) as isize - pt_x as isize;
                    if ox < 0 || ox >= ow as isize {
                        continue;
                    }
                    let dyb = ((b * oh + oy as usize) * ow + ox as usize) * ca;
                    let kb = (ky * kw + kx) * ca * cb;
                    for a_i in 0..ca {
                        let dv = dy[dyb + a_i];
                        if dv != 0.0 {
                            let krow = &k[kb + a_i * cb..kb + (a_i + 1) * cb];
                            for (a, &kv) in acc.iter_mut().zip(krow) {
                                *a += dv * kv;
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

pub(crate) fn deconv_backward_kernel(x: &[Real], xs: Shape, dy: &[Real], ks: Shape, stride: usize) -> Vec<Real> {
    let [kh, kw, ca, cb] = ks.dims();
    let (h, w) = (xs.h(), xs.w());
    let (oh, ow) = (h * stride, w * stride);
    let (pt_y, pt_x) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut dk = vec![0.0; ks.count()];
    let tap_len = ca * cb;
    let body = |tap: usize, dtap: &mut [Real]| {
        let (ky, kx) = (tap / kw, tap % kw);
        for b in 0..xs.n() {
            for iy in 0..h {
                let oy = (iy * stride + ky) as isize - pt_y as isize;
                if oy < 0 || oy >= oh as isize {
                    continue;
                }
                for ix in 0..w {
                    let ox = (ix * stride + kx) as isize - pt_x as isize;
                    if ox < 0 || ox >= ow as isize {
                        continue;
                    }
                    let xb = xs.index(b, iy, ix, 0);
                    let dyb = ((b * oh + oy as usize) * ow + ox as usize) * ca;
                    for a_i in 0..ca {
                        let dv = dy[dyb + a_i];
                        if dv != 0.0 {
                            let drow = &mut dtap[a_i * cb..(a_i + 1) * cb];
                            for (d, &xv) in drow.iter_mut().zip(&x[xb..xb + cb]) {
                                *d += dv * xv;
                            }
                        }
                    }
                }
            }
        }
    };
    if dy.len() >= 1 << 14 {
        dk.par_chunks_mut(tap_len).enumerate().for_each(|(t, s)| body(t, s));
    } else {
        dk.chunks_mut(tap_len).enumerate().for_each(|(t, s)| body(t, s));
    }
    dk
}

/// Per-channel mean and biased variance over (n, h, w), f64 accumulation.
pub(crate) fn channel_stats(x: &[Real], c: usize) -> (Vec<Real>, Vec<Real>) {
    let count = (x.len() / c) as f64;
    let mut sum = vec![0.0f64; c];
    let mut sumsq = vec![0.0f64; c];
    for fiber in x.chunks_exact(c) {
        for ch in 0..c {
            let v = fiber[ch] as f64;
            sum[ch] += v;
            sumsq[ch] += v * v;
        }
    }
    let mean: Vec<Real> = sum.iter().map(|&s| (s / count) as Real).collect();
    let var: Vec<Real> = sumsq
        .iter()
        .zip(&mean)
        .map(|(&sq, &m)| ((sq / count) - (m as f64) * (m as f64)).max(0.0) as Real)
        .collect();
    (mean, var)
}

/// Normalize with the given statistics: out = gamma * (x - mean) * inv_std + beta.
pub(crate) fn batch_norm_apply(
    x: &[Real],
    c: usize,
    mean: &[Real],
    inv_std: &[Real],
    gamma: &[Real],
    beta: &[Real],
) -> Vec<Real> {
    let mut out = vec![0.0; x.len()];
    for (ofiber, xfiber) in out.chunks_exact_mut(c).zip(x.chunks_exact(c)) {
        for ch in 0..c {
            ofiber[ch] = gamma[ch] * (xfiber[ch] - mean[ch]) * inv_std[ch] + beta[ch];
        }
    }
    out
}

/// Gradients for train-mode batch norm. Returns (dx, dgamma, dbeta).
pub(crate) fn batch_norm_backward_train(
    x: &[Real],
    dy: &[Real],
    c: usize,
    mean: &[Real],
    inv_std: &[Real],
    gamma: &[Real],
) -> (Vec<Real>, Vec<Real>, Vec<Real>) {
    let count = (x.len() / c) as f64;
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    for (dyf, xf) in dy.chunks_exact(c).zip(x.chunks_exact(c)) {
        for ch in 0..c {
            let xhat = ((xf[ch] - mean[ch]) * inv_std[ch]) as f64;
            sum_dy[ch] += dyf[ch] as f64;
            sum_dy_xhat[ch] += dyf[ch] as f64 * xhat;
        }
    }
    let mut dx = vec![0.0; x.len()];
    for ((dxf, dyf), xf) in dx.chunks_exact_mut(c).zip(dy.chunks_exact(c)).zip(x.chunks_exact(c)) {
        for ch in 0..c {
            let xhat = (xf[ch] - mean[ch]) * inv_std[ch];
            let term = dyf[ch] as f64 - sum_dy[ch] / count - xhat as f64 * sum_dy_xhat[ch] / count;
            dxf[ch] = gamma[ch] * inv_std[ch] * term as Real;
        }
    }
    let dgamma = sum_dy_xhat.into_iter().map(|v| v as Real).collect();
    let dbeta = sum_dy.into_iter().map(|v| v as Real).collect();
    (dx, dgamma, dbeta)
}

/// Gradients for infer-mode batch norm (running stats treated as constants).
pub(crate) fn batch_norm_backward_infer(
    x: &[Real],
    dy: &[Real],
    c: usize,
    mean: &[Real],
    inv_std: &[Real],
    gamma: &[Real],
) -> (Vec<Real>, Vec<Real>, Vec<Real>) {
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for (dyf, xf) in dy.chunks_exact(c).zip(x.chunks_exact(c)) {
        for ch in 0..c {
            dbeta[ch] += dyf[ch] as f64;
            dgamma[ch] += (dyf[ch] * (xf[ch] - mean[ch]) * inv_std[ch]) as f64;
        }
    }
    let mut dx = vec![0.0; x.len()];
    for (dxf, dyf) in dx.chunks_exact_mut(c).zip(dy.chunks_exact(c)) {
        for ch in 0..c {
            dxf[ch] = dyf[ch] * gamma[ch] * inv_std[ch];
        }
    }
    (
        dx,
        dgamma.into_iter().map(|v| v as Real).collect(),
        dbeta.into_iter().map(|v| v as Real).collect(),
    )
}
