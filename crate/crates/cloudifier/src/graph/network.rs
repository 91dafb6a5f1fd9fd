//! Assembling and running a full network.

use super::blocks::{
    build_conv_bn_relu, build_ds_res_block, build_inc_res_block, build_readout,
    build_upsample_branch, ConvBnRelu, DsResBlock, IncResBlock, InitRng, Readout, StateMut,
    StateRef, UpsampleBranch, Visitor, VisitorMut,
};
use super::config::{BlockKind, BlockSpec, NetworkConfig};
use crate::error::{Error, Result};
use crate::tensor::tape::GradTape;
use crate::tensor::{Mode, Real, Tensor};

enum Node {
    Stem(ConvBnRelu),
    IncRes(IncResBlock),
    DsRes { block: DsResBlock, tap: Option<usize> },
    Down(ConvBnRelu),
}

/// An executable network: parameter tensors in declaration order plus the
/// forward graph built from a [`NetworkConfig`]. A frozen network is
/// shareable across threads for inference; training mutates weights and
/// requires exclusive access.
pub struct Network {
    config: NetworkConfig,
    nodes: Vec<Node>,
    branches: Vec<UpsampleBranch>,
    readout: Readout,
    max_downsample: usize,
}

/// Build the graph described by `config`, asserting its declared layer count
/// and parameter budget.
pub fn build_network(config: NetworkConfig) -> Result<Network> {
    config.validate()?;
    let mut init = InitRng::new(config.init_seed);
    let mut nodes = Vec::new();
    let mut branches = Vec::new();
    let mut channels = config.input_channels;
    let mut stride_product = 1usize;
    let mut readout_depth = 0usize;

    for spec in &config.blocks {
        let BlockSpec { kind, out_maps, stride, tap_maps } = *spec;
        match kind {
            BlockKind::Stem => nodes.push(Node::Stem(build_conv_bn_relu(&mut init, channels, out_maps, 1))),
            BlockKind::Downsample => {
                stride_product *= stride;
                nodes.push(Node::Down(build_conv_bn_relu(&mut init, channels, out_maps, stride)));
            }
            BlockKind::IncRes => nodes.push(Node::IncRes(build_inc_res_block(&mut init, channels, out_maps))),
            BlockKind::DsRes => {
                let tap = match tap_maps {
                    Some(branch_maps) => {
                        branches.push(build_upsample_branch(&mut init, stride_product, out_maps, branch_maps)?);
                        readout_depth += branch_maps;
                        Some(branches.len() - 1)
                    }
                    None => None,
                };
                nodes.push(Node::DsRes { block: build_ds_res_block(&mut init, channels, out_maps), tap });
            }
        }
        channels = out_maps;
    }

    let readout = build_readout(&mut init, readout_depth, config.num_classes);
    let net = Network { config, nodes, branches, readout, max_downsample: stride_product };

    let (layers, params) = net.count_layers_and_params();
    if let Some(expected) = net.config.expected_layers {
        if layers != expected {
            return Err(Error::Build(format!(
                "{}: counted {layers} layers but the variant declares {expected}",
                net.config.variant_name
            )));
        }
    }
    if let Some((lo, hi)) = net.config.expected_params {
        if params < lo || params > hi {
            return Err(Error::Build(format!(
                "{}: {params} trainable parameters outside the declared budget [{lo}, {hi}]",
                net.config.variant_name
            )));
        }
    }
    Ok(net)
}

impl Network {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn max_downsample(&self) -> usize {
        self.max_downsample
    }

    /// Dense logits (n, h, w, C) for an (n, h, w, input_channels) input.
    /// Spatial dims must be divisible by [`Network::max_downsample`].
    pub fn forward(&self, tape: &mut GradTape, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let s = x.shape();
        if s.c() != self.config.input_channels {
            return Err(Error::ShapeMismatch {
                op: "network forward",
                detail: format!("input {} has {} channels, network expects {}", s, s.c(), self.config.input_channels),
            });
        }
        let m = self.max_downsample;
        if s.h() % m != 0 || s.w() % m != 0 {
            return Err(Error::ShapeMismatch {
                op: "network forward",
                detail: format!(
                    "input {}x{} not divisible by the network downsample factor; both dims must be multiples of {m}",
                    s.h(),
                    s.w()
                ),
            });
        }

        let mut cur = x.clone();
        let mut taps: Vec<Option<Tensor>> = vec![None; self.branches.len()];
        for node in &self.nodes {
            cur = match node {
                Node::Stem(conv) | Node::Down(conv) => conv.forward(tape, &cur, mode)?,
                Node::IncRes(block) => block.forward(tape, &cur, mode)?,
                Node::DsRes { block, tap } => {
                    let y = block.forward(tape, &cur, mode)?;
                    if let Some(idx) = tap {
                        taps[*idx] = Some(y.clone());
                    }
                    y
                }
            };
        }

        let mut upsampled = Vec::with_capacity(self.branches.len());
        for (branch, tap) in self.branches.iter().zip(&taps) {
            let tap = tap.as_ref().expect("every branch has a tapped ds_res block");
            upsampled.push(branch.forward(tape, tap)?);
        }
        let refs: Vec<&Tensor> = upsampled.iter().collect();
        self.readout.forward(tape, &refs)
    }

    /// Inference shorthand: no tape, running statistics.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(&mut GradTape::disabled(), x, Mode::Infer)
    }

    fn visit<'a>(&'a self, f: Visitor<'a, '_>) {
        for (i, node) in self.nodes.iter().enumerate() {
            let prefix = format!("n{i:02}");
            match node {
                Node::Stem(conv) => conv.visit(&format!("{prefix}.stem"), f),
                Node::Down(conv) => conv.visit(&format!("{prefix}.down"), f),
                Node::IncRes(block) => block.visit(&format!("{prefix}.inc"), f),
                Node::DsRes { block, .. } => block.visit(&format!("{prefix}.ds"), f),
            }
        }
        for (j, branch) in self.branches.iter().enumerate() {
            branch.visit(&format!("up{j:02}"), f);
        }
        self.readout.visit("readout", f);
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, f: VisitorMut<'a, '_>) {
        for (i, node) in self.nodes.iter_mut().enumerate() {
            let prefix = format!("n{i:02}");
            match node {
                Node::Stem(conv) => conv.visit_mut(&format!("{prefix}.stem"), f),
                Node::Down(conv) => conv.visit_mut(&format!("{prefix}.down"), f),
                Node::IncRes(block) => block.visit_mut(&format!("{prefix}.inc"), f),
                Node::DsRes { block, .. } => block.visit_mut(&format!("{prefix}.ds"), f),
            }
        }
        for (j, branch) in self.branches.iter_mut().enumerate() {
            branch.visit_mut(&format!("up{j:02}"), f);
        }
        self.readout.visit_mut("readout", f);
    }

    /// Trainable parameters in declaration order.
    pub fn parameters(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |_, s| {
            if let StateRef::Param(t) = s {
                out.push(t.clone());
            }
        });
        out
    }

    /// Mutable references to the trainable parameters, declaration order.
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.visit_mut(&mut |_, s| {
            if let StateMut::Param(t) = s {
                out.push(t);
            }
        });
        out
    }

    /// Counted layers (convs, depthwise and pointwise separately, transposed
    /// convs, the readout map) and the trainable parameter total.
    pub fn count_layers_and_params(&self) -> (usize, usize) {
        let mut layers = 1; // readout
        for node in &self.nodes {
            layers += match node {
                Node::Stem(_) | Node::Down(_) => 1,
                Node::IncRes(block) => block.layer_count(),
                Node::DsRes { block, .. } => block.layer_count(),
            };
        }
        layers += self.branches.len();

        let mut params = 0;
        self.visit(&mut |_, s| {
            if let StateRef::Param(t) = s {
                params += t.len();
            }
        });
        (layers, params)
    }

    /// Every primitive op kind the forward pass executes, in order. There is
    /// no pooling of any kind in this inventory, and a test holds us to it.
    pub fn op_inventory(&self) -> Vec<&'static str> {
        let mut ops = Vec::new();
        let conv_bn_relu = |ops: &mut Vec<&'static str>| {
            ops.extend(["conv2d", "batch_norm", "relu"]);
        };
        for node in &self.nodes {
            match node {
                Node::Stem(_) | Node::Down(_) => conv_bn_relu(&mut ops),
                Node::IncRes(_) => {
                    ops.push("conv2d"); // stem
                    conv_bn_relu(&mut ops); // column a
                    conv_bn_relu(&mut ops);
                    conv_bn_relu(&mut ops); // column b
                    conv_bn_relu(&mut ops);
                    conv_bn_relu(&mut ops); // column c
                    ops.extend(["concat_channels", "conv2d", "add"]);
                }
                Node::DsRes { block, .. } => {
                    ops.extend(["depthwise_conv2d", "conv2d", "batch_norm", "relu"]);
                    if block.projection.is_some() {
                        ops.push("conv2d");
                    }
                    ops.push("add");
                }
            }
        }
        for _ in &self.branches {
            ops.push("conv2d_transpose");
        }
        ops.extend(["concat_channels", "conv2d"]);
        ops
    }

    /// Snapshot of all persisted state (trainable parameters plus batch-norm
    /// running buffers) in declaration order, as (name, dims, f32 data).
    pub fn state_entries(&self) -> Vec<(String, [usize; 4], Vec<f32>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, s| match s {
            StateRef::Param(t) => {
                out.push((name, t.shape().dims(), t.data().iter().map(|&v| v as f32).collect()))
            }
            StateRef::Buffer(b) => {
                let data = b.read().expect("running stat lock");
                out.push((name, [1, 1, 1, data.len()], data.iter().map(|&v| v as f32).collect()))
            }
        });
        out
    }

    /// Load persisted state. Entries must match the network's own
    /// declaration order, names and shapes exactly.
    pub fn apply_state(&mut self, entries: &[(String, [usize; 4], Vec<f32>)]) -> Result<()> {
        let mut idx = 0usize;
        let mut failure: Option<String> = None;
        self.visit_mut(&mut |name, s| {
            if failure.is_some() {
                return;
            }
            let Some((got_name, dims, data)) = entries.get(idx) else {
                failure = Some(format!("missing tensor #{idx} ('{name}')"));
                return;
            };
            idx += 1;
            if *got_name != name {
                failure = Some(format!("tensor #{} is '{got_name}', expected '{name}'", idx - 1));
                return;
            }
            match s {
                StateMut::Param(t) => {
                    if *dims != t.shape().dims() {
                        failure = Some(format!("'{name}': stored dims {dims:?} vs network {:?}", t.shape().dims()));
                        return;
                    }
                    let dst = t.data_mut();
                    for (d, &v) in dst.iter_mut().zip(data) {
                        *d = v as Real;
                    }
                }
                StateMut::Buffer(b) => {
                    let mut dst = b.write().expect("running stat lock");
                    if data.len() != dst.len() {
                        failure = Some(format!("'{name}': stored len {} vs network {}", data.len(), dst.len()));
                        return;
                    }
                    for (d, &v) in dst.iter_mut().zip(data) {
                        *d = v as Real;
                    }
                }
            }
        });
        if let Some(msg) = failure {
            return Err(Error::Build(format!("checkpoint does not fit this architecture: {msg}")));
        }
        if idx != entries.len() {
            return Err(Error::Build(format!(
                "checkpoint has {} extra tensors beyond the {} the architecture declares",
                entries.len() - idx,
                idx
            )));
        }
        Ok(())
    }
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (layers, params) = self.count_layers_and_params();
        write!(f, "Network({}, classes={}, layers={layers}, params={params})", self.config.variant_name, self.config.num_classes)
    }
}

/// Shape helper used by inference padding: smallest multiple of `m` >= `v`.
pub fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}
