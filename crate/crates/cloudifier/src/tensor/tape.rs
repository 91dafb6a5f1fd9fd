//! Wengert-style gradient tape.
//!
//! Forward ops append one record each; [`GradTape::backward`] replays them in
//! reverse, accumulating adjoints additively per tensor id, and returns the
//! gradients of every `requires_grad` tensor that the loss reaches. A tape
//! must not be shared across concurrent training steps.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{LabelMap, Mode, Real, Tensor, TensorId};
use crate::error::{Error, Result};

/// Probabilities are clamped to this floor before any log.
pub const PROB_FLOOR: Real = 1e-12;

pub(crate) enum TapeOp {
    Conv2d {
        x: Tensor,
        kernel: Tensor,
        bias: Option<Tensor>,
        geom: ConvGeom,
        out: TensorId,
    },
    DepthwiseConv2d {
        x: Tensor,
        kernels: Tensor,
        geom: ConvGeom,
        out: TensorId,
    },
    ConvTranspose2d {
        x: Tensor,
        kernel: Tensor,
        stride: usize,
        out: TensorId,
    },
    BatchNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        mean: Vec<Real>,
        inv_std: Vec<Real>,
        mode: Mode,
        out: TensorId,
    },
    Relu {
        x: Tensor,
        out: TensorId,
    },
    Add {
        a: Tensor,
        b: Tensor,
        out: TensorId,
    },
    ConcatChannels {
        inputs: Vec<Tensor>,
        out: TensorId,
    },
    SoftmaxPerFiber {
        x: Tensor,
        probs: Tensor,
    },
    DenseNll {
        probs: Tensor,
        labels: LabelMap,
        out: TensorId,
    },
    FocalDense {
        probs: Tensor,
        labels: LabelMap,
        gamma: Real,
        weights: Option<Arc<Vec<Real>>>,
        out: TensorId,
    },
    SumAll {
        x: Tensor,
        out: TensorId,
    },
    WeightedSum {
        x: Tensor,
        weights: Arc<Vec<Real>>,
        out: TensorId,
    },
}

impl TapeOp {
    fn out_id(&self) -> TensorId {
        match self {
            TapeOp::Conv2d { out, .. }
            | TapeOp::DepthwiseConv2d { out, .. }
            | TapeOp::ConvTranspose2d { out, .. }
            | TapeOp::BatchNorm { out, .. }
            | TapeOp::Relu { out, .. }
            | TapeOp::Add { out, .. }
            | TapeOp::ConcatChannels { out, .. }
            | TapeOp::DenseNll { out, .. }
            | TapeOp::FocalDense { out, .. }
            | TapeOp::SumAll { out, .. }
            | TapeOp::WeightedSum { out, .. } => *out,
            TapeOp::SoftmaxPerFiber { probs, .. } => probs.id(),
        }
    }
}

/// Ordered record of executed primitive ops.
pub struct GradTape {
    ops: Vec<TapeOp>,
    recording: bool,
    outputs: HashSet<TensorId>,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    /// A recording tape for a training step.
    pub fn new() -> Self {
        GradTape { ops: Vec::new(), recording: true, outputs: HashSet::new() }
    }

    /// A no-op tape for pure inference; ops run but record nothing.
    pub fn disabled() -> Self {
        GradTape { ops: Vec::new(), recording: false, outputs: HashSet::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub(crate) fn record(&mut self, op: TapeOp) {
        if self.recording {
            self.outputs.insert(op.out_id());
            self.ops.push(op);
        }
    }

    fn needs_adjoint(&self, t: &Tensor) -> bool {
        t.wants_grad() || self.outputs.contains(&t.id())
    }

    /// Reverse sweep from a scalar loss recorded on this tape. Returns the
    /// gradient of every `requires_grad` tensor the loss reaches; tensors used
    /// more than once accumulate additively.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.shape().count() != 1 {
            return Err(Error::Tape(format!("backward needs a scalar loss, got shape {}", loss.shape())));
        }
        if !self.outputs.contains(&loss.id()) {
            return Err(Error::Tape("loss tensor was not produced on this tape (missing dependency)".into()));
        }

        let mut adjoints: HashMap<TensorId, Vec<Real>> = HashMap::new();
        adjoints.insert(loss.id(), vec![1.0]);
        let mut leaves: HashMap<TensorId, usize> = HashMap::new();

        for op in self.ops.iter().rev() {
            let Some(dy) = adjoints.get(&op.out_id()).cloned() else {
                continue; // branch that does not feed the loss
            };
            self.apply_backward(op, &dy, &mut adjoints, &mut leaves)?;
        }

        let map = leaves
            .into_keys()
            .filter_map(|id| adjoints.remove(&id).map(|g| (id, g)))
            .collect();
        Ok(Gradients { map })
    }

    fn apply_backward(
        &self,
        op: &TapeOp,
        dy: &[Real],
        adjoints: &mut HashMap<TensorId, Vec<Real>>,
        leaves: &mut HashMap<TensorId, usize>,
    ) -> Result<()> {
        let mut sink = |t: &Tensor, grad: Vec<Real>| {
            debug_assert_eq!(grad.len(), t.len());
            if t.wants_grad() {
                leaves.insert(t.id(), t.len());
            }
            match adjoints.entry(t.id()) {
                std::collections::hash_map::Entry::Occupied(mut e) => {
                    for (a, g) in e.get_mut().iter_mut().zip(grad) {
                        *a += g;
                    }
                }
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(grad);
                }
            }
        };

        match op {
            TapeOp::Conv2d { x, kernel, bias, geom, .. } => {
                if self.needs_adjoint(x) {
                    let dx = kernels::conv2d_backward_input(dy, kernel.data(), kernel.shape(), x.shape(), geom);
                    sink(x, dx);
                }
                if self.needs_adjoint(kernel) {
                    let dk = kernels::conv2d_backward_kernel(x.data(), x.shape(), dy, kernel.shape(), geom);
                    sink(kernel, dk);
                }
                if let Some(b) = bias {
                    if self.needs_adjoint(b) {
                        sink(b, kernels::reduce_bias_grad(dy, kernel.shape().dims()[3]));
                    }
                }
            }
            TapeOp::DepthwiseConv2d { x, kernels: k, geom, .. } => {
                let [kh, kw, _, _] = k.shape().dims();
                if self.needs_adjoint(x) {
                    sink(x, kernels::depthwise_backward_input(dy, k.data(), kh, kw, x.shape(), geom));
                }
                if self.needs_adjoint(k) {
                    sink(k, kernels::depthwise_backward_kernel(x.data(), x.shape(), dy, kh, kw, geom));
                }
            }
            TapeOp::ConvTranspose2d { x, kernel, stride, .. } => {
                if self.needs_adjoint(x) {
                    sink(x, kernels::deconv_backward_input(dy, kernel.data(), kernel.shape(), x.shape(), *stride));
                }
                if self.needs_adjoint(kernel) {
                    sink(kernel, kernels::deconv_backward_kernel(x.data(), x.shape(), dy, kernel.shape(), *stride));
                }
            }
            TapeOp::BatchNorm { x, gamma, beta, mean, inv_std, mode, .. } => {
                let c = x.shape().c();
                let (dx, dgamma, dbeta) = match mode {
                    Mode::Train => kernels::batch_norm_backward_train(x.data(), dy, c, mean, inv_std, gamma.data()),
                    Mode::Infer => kernels::batch_norm_backward_infer(x.data(), dy, c, mean, inv_std, gamma.data()),
                };
                if self.needs_adjoint(x) {
                    sink(x, dx);
                }
                if self.needs_adjoint(gamma) {
                    sink(gamma, dgamma);
                }
                if self.needs_adjoint(beta) {
                    sink(beta, dbeta);
                }
            }
            TapeOp::Relu { x, .. } => {
                if self.needs_adjoint(x) {
                    // Subgradient at 0 is 0.
                    let dx = x.data().iter().zip(dy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
                    sink(x, dx);
                }
            }
            TapeOp::Add { a, b, .. } => {
                if self.needs_adjoint(a) {
                    sink(a, dy.to_vec());
                }
                if self.needs_adjoint(b) {
                    sink(b, dy.to_vec());
                }
            }
            TapeOp::ConcatChannels { inputs, .. } => {
                let total_c: usize = inputs.iter().map(|t| t.shape().c()).sum();
                let mut offset = 0;
                for t in inputs {
                    let c = t.shape().c();
                    if self.needs_adjoint(t) {
                        let mut dt = vec![0.0; t.len()];
                        for (fi, dfiber) in dt.chunks_exact_mut(c).enumerate() {
                            let base = fi * total_c + offset;
                            dfiber.copy_from_slice(&dy[base..base + c]);
                        }
                        sink(t, dt);
                    }
                    offset += c;
                }
            }
            TapeOp::SoftmaxPerFiber { x, probs } => {
                if self.needs_adjoint(x) {
                    let c = probs.shape().c();
                    let p = probs.data();
                    let mut dx = vec![0.0; p.len()];
                    for ((dxf, pf), dyf) in
                        dx.chunks_exact_mut(c).zip(p.chunks_exact(c)).zip(dy.chunks_exact(c))
                    {
                        let mut dot = 0.0;
                        for (pv, gv) in pf.iter().zip(dyf) {
                            dot += pv * gv;
                        }
                        for ch in 0..c {
                            dxf[ch] = pf[ch] * (dyf[ch] - dot);
                        }
                    }
                    sink(x, dx);
                }
            }
            TapeOp::DenseNll { probs, labels, .. } => {
                if self.needs_adjoint(probs) {
                    let g = dy[0];
                    let shape = probs.shape();
                    let c = shape.c();
                    let norm = (labels.len()) as Real;
                    let p = probs.data();
                    let mut dp = vec![0.0; p.len()];
                    for (fi, &label) in labels.data().iter().enumerate() {
                        let idx = fi * c + usize::from(label);
                        if p[idx] > PROB_FLOOR {
                            dp[idx] = -g / (norm * p[idx]);
                        }
                    }
                    sink(probs, dp);
                }
            }
            TapeOp::FocalDense { probs, labels, gamma, weights, .. } => {
                if self.needs_adjoint(probs) {
                    let g = dy[0];
                    let c = probs.shape().c();
                    let norm = (labels.len()) as Real;
                    let p = probs.data();
                    let mut dp = vec![0.0; p.len()];
                    for (fi, &label) in labels.data().iter().enumerate() {
                        let idx = fi * c + usize::from(label);
                        let alpha = weights.as_ref().map_or(1.0, |w| w[usize::from(label)]);
                        let pt = p[idx].max(PROB_FLOOR);
                        let q = (1.0 - p[idx]).max(0.0);
                        let qf = q.max(PROB_FLOOR);
                        let mut d = *gamma * alpha * qf.powf(*gamma - 1.0) * pt.ln();
                        if p[idx] > PROB_FLOOR {
                            d -= alpha * q.powf(*gamma) / pt;
                        }
                        dp[idx] = g * d / norm;
                    }
                    sink(probs, dp);
                }
            }
            TapeOp::SumAll { x, .. } => {
                if self.needs_adjoint(x) {
                    sink(x, vec![dy[0]; x.len()]);
                }
            }
            TapeOp::WeightedSum { x, weights, .. } => {
                if self.needs_adjoint(x) {
                    sink(x, weights.iter().map(|&w| dy[0] * w).collect());
                }
            }
        }
        Ok(())
    }
}

/// Gradients keyed by tensor identity, as returned by [`GradTape::backward`].
#[derive(Debug)]
pub struct Gradients {
    map: HashMap<TensorId, Vec<Real>>,
}

impl Gradients {
    #[cfg(test)]
    pub(crate) fn from_parts(entries: Vec<(TensorId, Vec<Real>)>) -> Gradients {
        Gradients { map: entries.into_iter().collect() }
    }

    pub fn get(&self, t: &Tensor) -> Option<&[Real]> {
        self.map.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn get_id(&self, id: TensorId) -> Option<&[Real]> {
        self.map.get(&id).map(|v| v.as_slice())
    }

    /// Fill the tensor's gradient slot with its accumulated adjoint.
    pub fn write_into(&self, t: &mut Tensor) {
        if let Some(g) = self.map.get(&t.id()) {
            t.set_grad(g.clone());
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
