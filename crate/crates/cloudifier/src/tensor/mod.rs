//! Rank-4 tensors, parameter containers and the gradient tape.
//!
//! Everything the network computes flows through [`Tensor`]: a rank-4
//! (batch, row, col, channel) array of 32-bit floats in NHWC layout with the
//! channel axis fastest-varying, so the per-fiber class vector at one spatial
//! position is contiguous. A tensor optionally carries a same-shape gradient
//! slot filled in after a backward pass.
//!
//! The `f64` cargo feature switches [`Real`] to 64-bit for gradient
//! verification builds; file formats stay 32-bit either way.

mod kernels;
pub mod ops;
pub mod tape;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use crate::error::{Error, Result};

#[cfg(not(feature = "f64"))]
pub type Real = f32;
#[cfg(feature = "f64")]
pub type Real = f64;

/// Shape of a rank-4 tensor. Activations read it as (batch, rows, cols,
/// channels); convolution kernels as (kh, kw, c_in, c_out).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub fn nhwc(n: usize, h: usize, w: usize, c: usize) -> Self {
        Shape([n, h, w, c])
    }

    pub fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    pub fn dims(&self) -> [usize; 4] {
        self.0
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }

    pub fn h(&self) -> usize {
        self.0[1]
    }

    pub fn w(&self) -> usize {
        self.0[2]
    }

    pub fn c(&self) -> usize {
        self.0[3]
    }

    /// Total element count.
    pub fn count(&self) -> usize {
        self.0.iter().product()
    }

    /// Linear index of (n, y, x, c) in NHWC layout, channel fastest.
    #[inline(always)]
    pub fn index(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        ((n * self.0[1] + y) * self.0[2] + x) * self.0[3] + c
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

/// Identity of a tensor allocation. Clones of a tensor share the id, which is
/// what the gradient tape keys adjoints on.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct TensorId(u64);

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

impl TensorId {
    fn fresh() -> Self {
        TensorId(NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// Rank-4 array of [`Real`] values with an optional gradient slot.
///
/// Data is shared through an `Arc`, so cloning is cheap and clones keep the
/// same [`TensorId`]. Primitive ops never mutate their inputs; parameter
/// updates go through [`Tensor::data_mut`], which copies on write only if the
/// storage is still shared (e.g. by a live tape).
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Shape,
    data: Arc<Vec<Real>>,
    id: TensorId,
    requires_grad: bool,
    grad: Option<Vec<Real>>,
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<Real>) -> Result<Self> {
        if data.len() != shape.count() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape} wants {} values, got {}", shape.count(), data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            id: TensorId::fresh(),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::from_vec(shape, vec![0.0; shape.count()]).expect("length matches by construction")
    }

    pub fn filled(shape: Shape, value: Real) -> Self {
        Tensor::from_vec(shape, vec![value; shape.count()]).expect("length matches by construction")
    }

    /// A scalar tensor of shape (1,1,1,1).
    pub fn scalar(value: Real) -> Self {
        Tensor::filled(Shape::scalar(), value)
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn wants_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    /// Mutable access to the storage, copy-on-write when shared.
    /// The tensor keeps its identity; the gradient slot is invalidated.
    pub fn data_mut(&mut self) -> &mut [Real] {
        self.grad = None;
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    #[inline(always)]
    pub fn get(&self, n: usize, y: usize, x: usize, c: usize) -> Real {
        self.data[self.shape.index(n, y, x, c)]
    }

    /// The value of a scalar tensor.
    pub fn item(&self) -> Real {
        debug_assert_eq!(self.shape.count(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[Real]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<Real>) {
        debug_assert_eq!(grad.len(), self.len());
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

/// Dense per-pixel class indices for a batch, shape (n, h, w).
#[derive(Clone, Debug)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    data: Arc<Vec<u16>>,
}

impl LabelMap {
    pub fn from_vec(n: usize, h: usize, w: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::ShapeMismatch {
                op: "labels",
                detail: format!("({n}, {h}, {w}) wants {} values, got {}", n * h * w, data.len()),
            });
        }
        Ok(LabelMap { n, h, w, data: Arc::new(data) })
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    #[inline(always)]
    pub fn get(&self, n: usize, y: usize, x: usize) -> u16 {
        self.data[(n * self.h + y) * self.w + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Errors if any label is >= `classes`.
    pub fn check_range(&self, classes: usize) -> Result<()> {
        for &l in self.data.iter() {
            if usize::from(l) >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
        }
        Ok(())
    }
}

/// Whether batch-norm consumes batch statistics (training) or its running
/// averages (inference).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Padding {
    /// Zero padding of (k-1)/2 on each side; output dim = ceil(in/stride).
    Same,
    /// No padding; output dim = (in - k)/stride + 1.
    Valid,
}

/// Weights of one 2D convolution: kernel (kh, kw, c_in, c_out), optional
/// per-output-channel bias, stride and padding rule.
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub kernel: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvParams {
    pub fn new(kernel: Tensor, bias: Option<Tensor>, stride: usize, padding: Padding) -> Result<Self> {
        let [kh, kw, _c_in, c_out] = kernel.shape().dims();
        if stride < 1 {
            return Err(Error::InvalidArgument("conv stride must be >= 1".into()));
        }
        if padding == Padding::Same && (kh % 2 == 0 || kw % 2 == 0) {
            return Err(Error::InvalidArgument(format!(
                "same padding requires odd kernel dims, got {kh}x{kw}"
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != Shape::nhwc(1, 1, 1, c_out) {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("bias shape {} does not match {c_out} output maps", b.shape()),
                });
            }
        }
        Ok(ConvParams { kernel, bias, stride, padding })
    }

    pub fn c_in(&self) -> usize {
        self.kernel.shape().dims()[2]
    }

    pub fn c_out(&self) -> usize {
        self.kernel.shape().dims()[3]
    }
}

/// Batch normalization state for one layer: per-channel scale/shift plus
/// running statistics. Running buffers sit behind an `RwLock` so a frozen
/// network can run inference from `&self` while training updates them during
/// its exclusive access.
#[derive(Debug)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: RwLock<Vec<Real>>,
    pub running_var: RwLock<Vec<Real>>,
    pub eps: Real,
    pub momentum: Real,
}

pub const BATCH_NORM_EPS: Real = 1e-5;
pub const BATCH_NORM_MOMENTUM: Real = 0.9;

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::filled(Shape::nhwc(1, 1, 1, channels), 1.0).requires_grad(true),
            beta: Tensor::zeros(Shape::nhwc(1, 1, 1, channels)).requires_grad(true),
            running_mean: RwLock::new(vec![0.0; channels]),
            running_var: RwLock::new(vec![1.0; channels]),
            eps: BATCH_NORM_EPS,
            momentum: BATCH_NORM_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape().c()
    }

    /// Blend fresh batch statistics into the running buffers:
    /// running = momentum * running + (1 - momentum) * batch.
    pub fn update_running(&self, mean: &[Real], var: &[Real]) {
        let m = self.momentum;
        let mut rm = self.running_mean.write().expect("running_mean lock");
        let mut rv = self.running_var.write().expect("running_var lock");
        for (r, &b) in rm.iter_mut().zip(mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, &b) in rv.iter_mut().zip(var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }

    pub fn running_snapshot(&self) -> (Vec<Real>, Vec<Real>) {
        (
            self.running_mean.read().expect("running_mean lock").clone(),
            self.running_var.read().expect("running_var lock").clone(),
        )
    }

    pub fn set_running(&self, mean: Vec<Real>, var: Vec<Real>) {
        *self.running_mean.write().expect("running_mean lock") = mean;
        *self.running_var.write().expect("running_var lock") = var;
    }
}

impl Clone for BatchNormParams {
    fn clone(&self) -> Self {
        let (mean, var) = self.running_snapshot();
        BatchNormParams {
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
            running_mean: RwLock::new(mean),
            running_var: RwLock::new(var),
            eps: self.eps,
            momentum: self.momentum,
        }
    }
}
