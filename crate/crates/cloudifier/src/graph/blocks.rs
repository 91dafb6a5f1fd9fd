//! The network building blocks and their parameter enumeration.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::tape::GradTape;
use crate::tensor::{BatchNormParams, ConvParams, Mode, Padding, Real, Shape, Tensor};

/// Fan-in-scaled normal weight init, zero biases, unit gamma / zero beta.
pub struct InitRng {
    rng: ChaCha8Rng,
}

impl InitRng {
    pub fn new(seed: u64) -> Self {
        InitRng { rng: crate::rng::stream(seed, 0x1217) }
    }

    fn normal(&mut self, len: usize, std: f64) -> Vec<Real> {
        let dist = Normal::new(0.0f64, std).expect("std > 0");
        (0..len).map(|_| dist.sample(&mut self.rng) as Real).collect()
    }

    fn conv_kernel(&mut self, kh: usize, kw: usize, ci: usize, co: usize) -> Tensor {
        let shape = Shape::nhwc(kh, kw, ci, co);
        let std = (2.0 / (kh * kw * ci) as f64).sqrt();
        Tensor::from_vec(shape, self.normal(shape.count(), std)).unwrap().requires_grad(true)
    }

    fn depthwise_kernel(&mut self, kh: usize, kw: usize, c: usize) -> Tensor {
        let shape = Shape::nhwc(kh, kw, c, 1);
        let std = (2.0 / (kh * kw) as f64).sqrt();
        Tensor::from_vec(shape, self.normal(shape.count(), std)).unwrap().requires_grad(true)
    }

    fn deconv_kernel(&mut self, k: usize, ca: usize, cb: usize) -> Tensor {
        let shape = Shape::nhwc(k, k, ca, cb);
        let std = (2.0 / (k * k * cb) as f64).sqrt();
        Tensor::from_vec(shape, self.normal(shape.count(), std)).unwrap().requires_grad(true)
    }

    fn readout_weight(&mut self, depth: usize, classes: usize) -> Tensor {
        let shape = Shape::nhwc(1, 1, depth, classes);
        let std = (1.0 / depth as f64).sqrt();
        Tensor::from_vec(shape, self.normal(shape.count(), std)).unwrap().requires_grad(true)
    }

    fn zero_bias(&mut self, c: usize) -> Tensor {
        Tensor::zeros(Shape::nhwc(1, 1, 1, c)).requires_grad(true)
    }
}

/// A tensor slot reachable from the network: either a trainable parameter or
/// a persisted-but-frozen buffer (batch-norm running statistics).
pub(crate) enum StateRef<'a> {
    Param(&'a Tensor),
    Buffer(&'a std::sync::RwLock<Vec<Real>>),
}

pub(crate) enum StateMut<'a> {
    Param(&'a mut Tensor),
    Buffer(&'a std::sync::RwLock<Vec<Real>>),
}

pub(crate) type Visitor<'a, 'v> = &'v mut dyn FnMut(String, StateRef<'a>);
pub(crate) type VisitorMut<'a, 'v> = &'v mut dyn FnMut(String, StateMut<'a>);

fn visit_conv<'a>(p: &'a ConvParams, prefix: &str, f: Visitor<'a, '_>) {
    f(format!("{prefix}.kernel"), StateRef::Param(&p.kernel));
    if let Some(b) = &p.bias {
        f(format!("{prefix}.bias"), StateRef::Param(b));
    }
}

fn visit_conv_mut<'a>(p: &'a mut ConvParams, prefix: &str, f: VisitorMut<'a, '_>) {
    f(format!("{prefix}.kernel"), StateMut::Param(&mut p.kernel));
    if let Some(b) = &mut p.bias {
        f(format!("{prefix}.bias"), StateMut::Param(b));
    }
}

fn visit_bn<'a>(p: &'a BatchNormParams, prefix: &str, f: Visitor<'a, '_>) {
    f(format!("{prefix}.gamma"), StateRef::Param(&p.gamma));
    f(format!("{prefix}.beta"), StateRef::Param(&p.beta));
    f(format!("{prefix}.running_mean"), StateRef::Buffer(&p.running_mean));
    f(format!("{prefix}.running_var"), StateRef::Buffer(&p.running_var));
}

fn visit_bn_mut<'a>(p: &'a mut BatchNormParams, prefix: &str, f: VisitorMut<'a, '_>) {
    f(format!("{prefix}.gamma"), StateMut::Param(&mut p.gamma));
    f(format!("{prefix}.beta"), StateMut::Param(&mut p.beta));
    f(format!("{prefix}.running_mean"), StateMut::Buffer(&p.running_mean));
    f(format!("{prefix}.running_var"), StateMut::Buffer(&p.running_var));
}

/// Conv (no bias) + batch-norm + ReLU, the unit every non-linear convolution
/// in the graph is made of.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: ConvParams,
    pub bn: BatchNormParams,
}

impl ConvBnRelu {
    fn new(init: &mut InitRng, kh: usize, kw: usize, ci: usize, co: usize, stride: usize) -> Self {
        ConvBnRelu {
            conv: ConvParams::new(init.conv_kernel(kh, kw, ci, co), None, stride, Padding::Same).unwrap(),
            bn: BatchNormParams::new(co),
        }
    }

    pub fn forward(&self, tape: &mut GradTape, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = ops::conv2d(tape, x, &self.conv)?;
        let y = ops::batch_norm(tape, &y, &self.bn, mode)?;
        ops::relu(tape, &y)
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, f: Visitor<'a, '_>) {
        visit_conv(&self.conv, prefix, f);
        visit_bn(&self.bn, &format!("{prefix}.bn"), f);
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, prefix: &str, f: VisitorMut<'a, '_>) {
        visit_conv_mut(&mut self.conv, prefix, f);
        visit_bn_mut(&mut self.bn, &format!("{prefix}.bn"), f);
    }
}

/// Inception-residual block: a linear 1x1 stem feeds three columns (1x1;
/// 1x1 then 3x3; 1x1 then 5x5, each conv + BN + ReLU), their concat passes a
/// linear 1x1 bottleneck back to `out_maps`, and the block input is added on
/// an activation-free skip path. When the channel counts differ the stem
/// output doubles as the linear projection of the input, so the block always
/// holds exactly 7 convolutions.
#[derive(Clone, Debug)]
pub struct IncResBlock {
    pub stem: ConvParams,
    pub col_a: ConvBnRelu,
    pub col_b1: ConvBnRelu,
    pub col_b2: ConvBnRelu,
    pub col_c1: ConvBnRelu,
    pub col_c2: ConvBnRelu,
    pub bottleneck: ConvParams,
    pub in_channels: usize,
    pub out_maps: usize,
}

/// Internal column width of an inception-residual block.
pub fn inc_res_column_maps(out_maps: usize) -> usize {
    (out_maps / 2).max(1)
}

pub fn build_inc_res_block(init: &mut InitRng, in_channels: usize, out_maps: usize) -> IncResBlock {
    let cw = inc_res_column_maps(out_maps);
    IncResBlock {
        stem: ConvParams::new(
            init.conv_kernel(1, 1, in_channels, out_maps),
            Some(init.zero_bias(out_maps)),
            1,
            Padding::Same,
        )
        .unwrap(),
        col_a: ConvBnRelu::new(init, 1, 1, out_maps, cw, 1),
        col_b1: ConvBnRelu::new(init, 1, 1, out_maps, cw, 1),
        col_b2: ConvBnRelu::new(init, 3, 3, cw, cw, 1),
        col_c1: ConvBnRelu::new(init, 1, 1, out_maps, cw, 1),
        col_c2: ConvBnRelu::new(init, 5, 5, cw, cw, 1),
        bottleneck: ConvParams::new(
            init.conv_kernel(1, 1, 3 * cw, out_maps),
            Some(init.zero_bias(out_maps)),
            1,
            Padding::Same,
        )
        .unwrap(),
        in_channels,
        out_maps,
    }
}

impl IncResBlock {
    pub fn forward(&self, tape: &mut GradTape, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let stem = ops::conv2d(tape, x, &self.stem)?;
        let a = self.col_a.forward(tape, &stem, mode)?;
        let b = self.col_b1.forward(tape, &stem, mode)?;
        let b = self.col_b2.forward(tape, &b, mode)?;
        let c = self.col_c1.forward(tape, &stem, mode)?;
        let c = self.col_c2.forward(tape, &c, mode)?;
        let merged = ops::concat_channels(tape, &[&a, &b, &c])?;
        let main = ops::conv2d(tape, &merged, &self.bottleneck)?;
        let skip = if self.in_channels == self.out_maps { x } else { &stem };
        ops::add(tape, &main, skip)
    }

    /// Convolutions under the documented counting convention.
    pub fn layer_count(&self) -> usize {
        7
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, f: Visitor<'a, '_>) {
        visit_conv(&self.stem, &format!("{prefix}.stem"), f);
        self.col_a.visit(&format!("{prefix}.a1"), f);
        self.col_b1.visit(&format!("{prefix}.b1"), f);
        self.col_b2.visit(&format!("{prefix}.b2"), f);
        self.col_c1.visit(&format!("{prefix}.c1"), f);
        self.col_c2.visit(&format!("{prefix}.c2"), f);
        visit_conv(&self.bottleneck, &format!("{prefix}.bottleneck"), f);
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, prefix: &str, f: VisitorMut<'a, '_>) {
        visit_conv_mut(&mut self.stem, &format!("{prefix}.stem"), f);
        self.col_a.visit_mut(&format!("{prefix}.a1"), f);
        self.col_b1.visit_mut(&format!("{prefix}.b1"), f);
        self.col_b2.visit_mut(&format!("{prefix}.b2"), f);
        self.col_c1.visit_mut(&format!("{prefix}.c1"), f);
        self.col_c2.visit_mut(&format!("{prefix}.c2"), f);
        visit_conv_mut(&mut self.bottleneck, &format!("{prefix}.bottleneck"), f);
    }
}

/// Depthwise-separable residual block: 3x3 depthwise + 1x1 pointwise with
/// bias, batch-norm + ReLU after the pointwise stage, and the input added on
/// an activation-free skip (linear bias-free 1x1 projection on channel
/// mismatch). Parameters: 9*in + in*out + out + 2*out (+ in*out projection).
#[derive(Clone, Debug)]
pub struct DsResBlock {
    pub depthwise: Tensor,
    pub pointwise: Tensor,
    pub bias: Tensor,
    pub bn: BatchNormParams,
    pub projection: Option<Tensor>,
    pub in_channels: usize,
    pub out_maps: usize,
}

pub fn build_ds_res_block(init: &mut InitRng, in_channels: usize, out_maps: usize) -> DsResBlock {
    DsResBlock {
        depthwise: init.depthwise_kernel(3, 3, in_channels),
        pointwise: init.conv_kernel(1, 1, in_channels, out_maps),
        bias: init.zero_bias(out_maps),
        bn: BatchNormParams::new(out_maps),
        projection: (in_channels != out_maps).then(|| init.conv_kernel(1, 1, in_channels, out_maps)),
        in_channels,
        out_maps,
    }
}

impl DsResBlock {
    pub fn forward(&self, tape: &mut GradTape, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = ops::depthwise_separable_conv2d(tape, x, &self.depthwise, &self.pointwise, Some(&self.bias), 1)?;
        let y = ops::batch_norm(tape, &y, &self.bn, mode)?;
        let y = ops::relu(tape, &y)?;
        match &self.projection {
            None => ops::add(tape, &y, x),
            Some(proj) => {
                let skip = ops::conv2d_impl(tape, x, proj, None, 1, Padding::Same, "ds_res projection")?;
                ops::add(tape, &y, &skip)
            }
        }
    }

    pub fn layer_count(&self) -> usize {
        2 + usize::from(self.projection.is_some())
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, f: Visitor<'a, '_>) {
        f(format!("{prefix}.depthwise"), StateRef::Param(&self.depthwise));
        f(format!("{prefix}.pointwise"), StateRef::Param(&self.pointwise));
        f(format!("{prefix}.bias"), StateRef::Param(&self.bias));
        visit_bn(&self.bn, &format!("{prefix}.bn"), f);
        if let Some(p) = &self.projection {
            f(format!("{prefix}.projection"), StateRef::Param(p));
        }
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, prefix: &str, f: VisitorMut<'a, '_>) {
        f(format!("{prefix}.depthwise"), StateMut::Param(&mut self.depthwise));
        f(format!("{prefix}.pointwise"), StateMut::Param(&mut self.pointwise));
        f(format!("{prefix}.bias"), StateMut::Param(&mut self.bias));
        visit_bn_mut(&mut self.bn, &format!("{prefix}.bn"), f);
        if let Some(p) = &mut self.projection {
            f(format!("{prefix}.projection"), StateMut::Param(p));
        }
    }
}

/// One transposed convolution restoring a tap to the input resolution:
/// stride s, kernel 2s (1x1 at stride 1).
#[derive(Clone, Debug)]
pub struct UpsampleBranch {
    pub kernel: Tensor,
    pub stride: usize,
}

pub fn upsample_kernel_size(stride: usize) -> usize {
    if stride == 1 {
        1
    } else {
        2 * stride
    }
}

pub fn build_upsample_branch(
    init: &mut InitRng,
    tap_stride: usize,
    tap_channels: usize,
    out_maps: usize,
) -> Result<UpsampleBranch> {
    if tap_stride == 0 || !tap_stride.is_power_of_two() {
        return Err(Error::Build(format!(
            "upsample branch: tap stride must be a power of two, got {tap_stride}"
        )));
    }
    let k = upsample_kernel_size(tap_stride);
    Ok(UpsampleBranch { kernel: init.deconv_kernel(k, out_maps, tap_channels), stride: tap_stride })
}

impl UpsampleBranch {
    pub fn forward(&self, tape: &mut GradTape, tap: &Tensor) -> Result<Tensor> {
        ops::conv2d_transpose(tape, tap, &self.kernel, self.stride)
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, f: Visitor<'a, '_>) {
        f(format!("{prefix}.kernel"), StateRef::Param(&self.kernel));
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, prefix: &str, f: VisitorMut<'a, '_>) {
        f(format!("{prefix}.kernel"), StateMut::Param(&mut self.kernel));
    }
}

/// Readout: concatenate the upsampled volumes to an (n, H, W, D) stack and
/// map every fiber through one shared D -> C affine layer (a 1x1 conv),
/// returning raw logits.
#[derive(Clone, Debug)]
pub struct Readout {
    pub weight: Tensor,
    pub bias: Tensor,
    pub depth: usize,
    pub classes: usize,
}

pub fn build_readout(init: &mut InitRng, depth: usize, classes: usize) -> Readout {
    Readout { weight: init.readout_weight(depth, classes), bias: init.zero_bias(classes), depth, classes }
}

impl Readout {
    pub fn forward(&self, tape: &mut GradTape, branches: &[&Tensor]) -> Result<Tensor> {
        let merged = ops::concat_channels(tape, branches)?;
        if merged.shape().c() != self.depth {
            return Err(Error::ShapeMismatch {
                op: "readout",
                detail: format!("merged depth {} but readout expects {}", merged.shape().c(), self.depth),
            });
        }
        ops::conv2d_impl(tape, &merged, &self.weight, Some(&self.bias), 1, Padding::Same, "readout")
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, f: Visitor<'a, '_>) {
        f(format!("{prefix}.weight"), StateRef::Param(&self.weight));
        f(format!("{prefix}.bias"), StateRef::Param(&self.bias));
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, prefix: &str, f: VisitorMut<'a, '_>) {
        f(format!("{prefix}.weight"), StateMut::Param(&mut self.weight));
        f(format!("{prefix}.bias"), StateMut::Param(&mut self.bias));
    }
}

/// Stride-1 stem / stride-2 downsampling 3x3 conv unit.
pub(crate) fn build_conv_bn_relu(init: &mut InitRng, ci: usize, co: usize, stride: usize) -> ConvBnRelu {
    ConvBnRelu::new(init, 3, 3, ci, co, stride)
}
