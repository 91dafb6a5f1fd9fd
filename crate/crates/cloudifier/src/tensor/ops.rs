//! Differentiable primitive operations.
//!
//! Every op is a pure function of its tensor inputs: outputs are freshly
//! allocated, inputs are never mutated (batch-norm's running statistics are
//! layer state, not an input tensor, and only move in train mode). Ops record
//! themselves on the passed [`GradTape`] when it is recording, and reject
//! non-finite outputs instead of letting NaNs propagate silently.

use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::tape::{GradTape, TapeOp, PROB_FLOOR};
use super::{BatchNormParams, ConvParams, LabelMap, Mode, Padding, Real, Shape, Tensor};
use crate::error::{Error, Result};

fn ensure_nonempty(op: &'static str, x: &Tensor) -> Result<()> {
    if x.is_empty() {
        return Err(Error::EmptyInput { op });
    }
    Ok(())
}

fn ensure_finite(op: &'static str, data: &[Real]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn conv_geometry(op: &'static str, xs: Shape, ks: Shape, stride: usize, padding: Padding) -> Result<ConvGeom> {
    let [kh, kw, _, _] = ks.dims();
    let (oh, ow, pad_y, pad_x) = kernels::conv_out_dims(xs, kh, kw, stride, padding).map_err(|e| match e {
        Error::ShapeMismatch { detail, .. } => Error::ShapeMismatch { op, detail },
        other => other,
    })?;
    Ok(ConvGeom { stride, pad_y, pad_x, oh, ow })
}

/// 2D convolution over NHWC input with kernel (kh, kw, c_in, c_out).
/// Same padding keeps out = ceil(in/stride); each output value is the dot
/// product of the kernel with the zero-padded receptive field plus bias.
pub fn conv2d(tape: &mut GradTape, x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    conv2d_impl(tape, x, &p.kernel, p.bias.as_ref(), p.stride, p.padding, "conv2d")
}

pub(crate) fn conv2d_impl(
    tape: &mut GradTape,
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: Padding,
    op: &'static str,
) -> Result<Tensor> {
    ensure_nonempty(op, x)?;
    let ks = kernel.shape();
    if ks.dims()[2] != x.shape().c() {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("input {} has {} channels, kernel {} expects {}", x.shape(), x.shape().c(), ks, ks.dims()[2]),
        });
    }
    if padding == Padding::Same && (ks.dims()[0] % 2 == 0 || ks.dims()[1] % 2 == 0) {
        return Err(Error::InvalidArgument(format!(
            "{op}: same padding requires an odd kernel, got {}x{}",
            ks.dims()[0],
            ks.dims()[1]
        )));
    }
    let geom = conv_geometry(op, x.shape(), ks, stride, padding)?;
    let data = kernels::conv2d_forward(x.data(), x.shape(), kernel.data(), ks, bias.map(|b| b.data()), &geom);
    ensure_finite(op, &data)?;
    let out = Tensor::from_vec(Shape::nhwc(x.shape().n(), geom.oh, geom.ow, ks.dims()[3]), data)?;
    tape.record(TapeOp::Conv2d {
        x: x.clone(),
        kernel: kernel.clone(),
        bias: bias.cloned(),
        geom,
        out: out.id(),
    });
    Ok(out)
}

/// Per-channel spatial filtering: one (kh, kw) kernel per input channel,
/// kernels packed as (kh, kw, c, 1). The strided stage of the separable conv.
pub fn depthwise_conv2d(tape: &mut GradTape, x: &Tensor, kernels_t: &Tensor, stride: usize) -> Result<Tensor> {
    let op = "depthwise_conv2d";
    ensure_nonempty(op, x)?;
    let [kh, kw, kc, rest] = kernels_t.shape().dims();
    if kc != x.shape().c() || rest != 1 {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!(
                "need one (kh, kw) kernel per input channel: input {} vs kernels {}",
                x.shape(),
                kernels_t.shape()
            ),
        });
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::InvalidArgument(format!("{op}: same padding requires an odd kernel, got {kh}x{kw}")));
    }
    let geom = conv_geometry(op, x.shape(), kernels_t.shape(), stride, Padding::Same)?;
    let data = kernels::depthwise_forward(x.data(), x.shape(), kernels_t.data(), kh, kw, &geom);
    ensure_finite(op, &data)?;
    let out = Tensor::from_vec(Shape::nhwc(x.shape().n(), geom.oh, geom.ow, kc), data)?;
    tape.record(TapeOp::DepthwiseConv2d { x: x.clone(), kernels: kernels_t.clone(), geom, out: out.id() });
    Ok(out)
}

/// Depthwise-separable convolution: per-channel (kh, kw) filtering (strided)
/// followed by a 1x1 cross-channel mix with bias. Parameter count is
/// kh*kw*c_in + c_in*c_out + c_out.
pub fn depthwise_separable_conv2d(
    tape: &mut GradTape,
    x: &Tensor,
    depthwise: &Tensor,
    pointwise: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
) -> Result<Tensor> {
    let op = "depthwise_separable_conv2d";
    let [ph, pw, pci, _pco] = pointwise.shape().dims();
    if ph != 1 || pw != 1 {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("pointwise stage must be 1x1, got {}", pointwise.shape()),
        });
    }
    if pci != x.shape().c() {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("pointwise expects {} channels, input {} has {}", pci, x.shape(), x.shape().c()),
        });
    }
    let spatial = depthwise_conv2d(tape, x, depthwise, stride)?;
    conv2d_impl(tape, &spatial, pointwise, bias, 1, Padding::Same, op)
}

/// Transposed convolution ("backward convolution"): the adjoint of a stride-s
/// same-padded conv2d. Kernel is (kh, kw, c_out, c_in); output spatial dims
/// are exactly input dims * stride.
pub fn conv2d_transpose(tape: &mut GradTape, x: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    let op = "conv2d_transpose";
    ensure_nonempty(op, x)?;
    if stride < 1 {
        return Err(Error::InvalidArgument(format!("{op}: stride must be >= 1")));
    }
    let ks = kernel.shape();
    let [_, _, ca, cb] = ks.dims();
    if cb != x.shape().c() {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("input {} has {} channels, kernel {} expects {}", x.shape(), x.shape().c(), ks, cb),
        });
    }
    let data = kernels::deconv_forward(x.data(), x.shape(), kernel.data(), ks, stride);
    ensure_finite(op, &data)?;
    let out = Tensor::from_vec(
        Shape::nhwc(x.shape().n(), x.shape().h() * stride, x.shape().w() * stride, ca),
        data,
    )?;
    tape.record(TapeOp::ConvTranspose2d { x: x.clone(), kernel: kernel.clone(), stride, out: out.id() });
    Ok(out)
}

/// Batch normalization. Train mode normalizes per channel over (n, h, w) with
/// batch statistics and folds them into the running averages; infer mode uses
/// the running averages and touches nothing.
pub fn batch_norm(tape: &mut GradTape, x: &Tensor, p: &BatchNormParams, mode: Mode) -> Result<Tensor> {
    let op = "batch_norm";
    ensure_nonempty(op, x)?;
    let c = x.shape().c();
    if p.channels() != c {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("params cover {} channels, input {} has {}", p.channels(), x.shape(), c),
        });
    }
    let (mean, var) = match mode {
        Mode::Train => {
            let (mean, var) = kernels::channel_stats(x.data(), c);
            p.update_running(&mean, &var);
            (mean, var)
        }
        Mode::Infer => p.running_snapshot(),
    };
    let inv_std: Vec<Real> = var.iter().map(|&v| 1.0 / (v + p.eps).sqrt()).collect();
    let data = kernels::batch_norm_apply(x.data(), c, &mean, &inv_std, p.gamma.data(), p.beta.data());
    ensure_finite(op, &data)?;
    let out = Tensor::from_vec(x.shape(), data)?;
    tape.record(TapeOp::BatchNorm {
        x: x.clone(),
        gamma: p.gamma.clone(),
        beta: p.beta.clone(),
        mean,
        inv_std,
        mode,
        out: out.id(),
    });
    Ok(out)
}

/// Elementwise max(x, 0).
pub fn relu(tape: &mut GradTape, x: &Tensor) -> Result<Tensor> {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    let out = Tensor::from_vec(x.shape(), data)?;
    tape.record(TapeOp::Relu { x: x.clone(), out: out.id() });
    Ok(out)
}

/// Elementwise sum of two same-shape tensors.
pub fn add(tape: &mut GradTape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "add",
            detail: format!("{} vs {}", a.shape(), b.shape()),
        });
    }
    let data: Vec<Real> = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    ensure_finite("add", &data)?;
    let out = Tensor::from_vec(a.shape(), data)?;
    tape.record(TapeOp::Add { a: a.clone(), b: b.clone(), out: out.id() });
    Ok(out)
}

/// Stack tensors along the channel axis, preserving per-input channel order.
pub fn concat_channels(tape: &mut GradTape, inputs: &[&Tensor]) -> Result<Tensor> {
    let op = "concat_channels";
    let first = inputs.first().ok_or_else(|| Error::InvalidArgument(format!("{op}: empty input list")))?;
    let (n, h, w) = (first.shape().n(), first.shape().h(), first.shape().w());
    for t in inputs {
        let s = t.shape();
        if (s.n(), s.h(), s.w()) != (n, h, w) {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("all inputs must share (n, h, w): {} vs {}", first.shape(), s),
            });
        }
    }
    let total_c: usize = inputs.iter().map(|t| t.shape().c()).sum();
    let fibers = n * h * w;
    let mut data = vec![0.0; fibers * total_c];
    let mut offset = 0;
    for t in inputs {
        let c = t.shape().c();
        for (fi, fiber) in t.data().chunks_exact(c).enumerate() {
            let base = fi * total_c + offset;
            data[base..base + c].copy_from_slice(fiber);
        }
        offset += c;
    }
    let out = Tensor::from_vec(Shape::nhwc(n, h, w, total_c), data)?;
    tape.record(TapeOp::ConcatChannels {
        inputs: inputs.iter().map(|t| (*t).clone()).collect(),
        out: out.id(),
    });
    Ok(out)
}

/// Softmax over the class axis of every 1x1xC fiber, with max subtraction for
/// stability. Output fibers sum to 1.
pub fn softmax_per_fiber(tape: &mut GradTape, logits: &Tensor) -> Result<Tensor> {
    let op = "softmax_per_fiber";
    ensure_nonempty(op, logits)?;
    let c = logits.shape().c();
    if c < 2 {
        return Err(Error::InvalidArgument(format!("{op}: need at least 2 classes, got {c}")));
    }
    let mut data = vec![0.0; logits.len()];
    for (ofiber, xfiber) in data.chunks_exact_mut(c).zip(logits.data().chunks_exact(c)) {
        let max = xfiber.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        let mut sum = 0.0;
        for (o, &v) in ofiber.iter_mut().zip(xfiber) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in ofiber.iter_mut() {
            *o /= sum;
        }
    }
    ensure_finite(op, &data)?;
    let out = Tensor::from_vec(logits.shape(), data)?;
    tape.record(TapeOp::SoftmaxPerFiber { x: logits.clone(), probs: out.clone() });
    Ok(out)
}

fn check_loss_inputs(op: &'static str, probs: &Tensor, labels: &LabelMap) -> Result<()> {
    ensure_nonempty(op, probs)?;
    let s = probs.shape();
    if (labels.n, labels.h, labels.w) != (s.n(), s.h(), s.w()) {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("probs {} vs labels ({}, {}, {})", s, labels.n, labels.h, labels.w),
        });
    }
    labels.check_range(s.c())
}

/// Dense negative log-likelihood: -(1/(N*H*W)) * sum over pixels of
/// log p(true class), probabilities floored at 1e-12 before the log.
pub fn dense_nll_loss(tape: &mut GradTape, probs: &Tensor, labels: &LabelMap) -> Result<Tensor> {
    let op = "dense_nll_loss";
    check_loss_inputs(op, probs, labels)?;
    let c = probs.shape().c();
    let p = probs.data();
    let mut total = 0.0f64;
    for (fi, &label) in labels.data().iter().enumerate() {
        let pt = p[fi * c + usize::from(label)].max(PROB_FLOOR);
        total -= (pt as f64).ln();
    }
    let loss = (total / labels.len() as f64) as Real;
    ensure_finite(op, &[loss])?;
    let out = Tensor::scalar(loss);
    tape.record(TapeOp::DenseNll { probs: probs.clone(), labels: labels.clone(), out: out.id() });
    Ok(out)
}

/// Focal dense loss: per pixel -alpha_y * (1 - p_y)^gamma * log p_y with the
/// same 1/(N*H*W) normalization. gamma = 0 with unit weights reduces exactly
/// to [`dense_nll_loss`].
pub fn focal_dense_loss(
    tape: &mut GradTape,
    probs: &Tensor,
    labels: &LabelMap,
    gamma: Real,
    class_weights: Option<&[Real]>,
) -> Result<Tensor> {
    let op = "focal_dense_loss";
    check_loss_inputs(op, probs, labels)?;
    if gamma < 0.0 {
        return Err(Error::InvalidArgument(format!("{op}: gamma must be >= 0, got {gamma}")));
    }
    let c = probs.shape().c();
    if let Some(w) = class_weights {
        if w.len() != c {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{} class weights for {} classes", w.len(), c),
            });
        }
    }
    let p = probs.data();
    let mut total = 0.0f64;
    for (fi, &label) in labels.data().iter().enumerate() {
        let alpha = class_weights.map_or(1.0, |w| w[usize::from(label)]);
        let pv = p[fi * c + usize::from(label)];
        let pt = pv.max(PROB_FLOOR);
        let q = (1.0 - pv).max(0.0);
        total -= (alpha * q.powf(gamma)) as f64 * (pt as f64).ln();
    }
    let loss = (total / labels.len() as f64) as Real;
    ensure_finite(op, &[loss])?;
    let out = Tensor::scalar(loss);
    tape.record(TapeOp::FocalDense {
        probs: probs.clone(),
        labels: labels.clone(),
        gamma,
        weights: class_weights.map(|w| Arc::new(w.to_vec())),
        out: out.id(),
    });
    Ok(out)
}

/// Sum of all elements as a scalar tensor.
pub fn sum_all(tape: &mut GradTape, x: &Tensor) -> Result<Tensor> {
    let total: f64 = x.data().iter().map(|&v| v as f64).sum();
    let out = Tensor::scalar(total as Real);
    ensure_finite("sum_all", out.data())?;
    tape.record(TapeOp::SumAll { x: x.clone(), out: out.id() });
    Ok(out)
}

/// Fixed-weight scalar reduction sum(w, x), f64-accumulated. Its gradient is
/// exactly `weights`, which makes it the reduction of choice for gradient
/// verification probes.
pub fn weighted_sum(tape: &mut GradTape, x: &Tensor, weights: &[Real]) -> Result<Tensor> {
    if weights.len() != x.len() {
        return Err(Error::ShapeMismatch {
            op: "weighted_sum",
            detail: format!("{} weights for {} elements", weights.len(), x.len()),
        });
    }
    let total: f64 = x.data().iter().zip(weights).map(|(&v, &w)| v as f64 * w as f64).sum();
    let out = Tensor::scalar(total as Real);
    ensure_finite("weighted_sum", out.data())?;
    tape.record(TapeOp::WeightedSum {
        x: x.clone(),
        weights: Arc::new(weights.to_vec()),
        out: out.id(),
    });
    Ok(out)
}
