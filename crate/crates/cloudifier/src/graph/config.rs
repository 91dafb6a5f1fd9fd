//! Declarative network configuration and its textual descriptor.
//!
//! A network is a stem convolution followed by stages that alternate
//! inception-residual and depthwise-separable-residual blocks, with stride-2
//! downsampling convolutions between stages (never pooling). Every DS RES
//! block output is a tap feeding a transposed-convolution upsampling branch;
//! the branches are merged by the readout into dense per-fiber logits.
//!
//! The published constraints pin the two named variants: cloudifier109
//! counts exactly 109 layers with a parameter total in [1.0e6, 1.4e6], and
//! cloudifier50 counts exactly 50. The stage tables below are this
//! implementation's concrete choice satisfying those constraints; the builder
//! asserts both at construction.

use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BlockKind {
    /// 3x3 stride-1 conv + batch-norm + ReLU on the raw input.
    Stem,
    /// Three-column inception block with pre-activation residual skip.
    IncRes,
    /// Depthwise-separable block with pre-activation residual skip.
    DsRes,
    /// Stride-2 3x3 conv + batch-norm + ReLU between stages.
    Downsample,
}

impl BlockKind {
    fn name(&self) -> &'static str {
        match self {
            BlockKind::Stem => "stem",
            BlockKind::IncRes => "inc_res",
            BlockKind::DsRes => "ds_res",
            BlockKind::Downsample => "down",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "stem" => Some(BlockKind::Stem),
            "inc_res" => Some(BlockKind::IncRes),
            "ds_res" => Some(BlockKind::DsRes),
            "down" => Some(BlockKind::Downsample),
            _ => None,
        }
    }
}

/// One entry of the layer sequence. `tap_maps` is the upsampling branch's
/// output feature-map count for tapped DS RES blocks.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub out_maps: usize,
    pub stride: usize,
    pub tap_maps: Option<usize>,
}

impl BlockSpec {
    fn stage_block(kind: BlockKind, out_maps: usize, tap_maps: Option<usize>) -> Self {
        BlockSpec { kind, out_maps, stride: 1, tap_maps }
    }

    fn down(out_maps: usize) -> Self {
        BlockSpec { kind: BlockKind::Downsample, out_maps, stride: 2, tap_maps: None }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct NetworkConfig {
    pub variant_name: String,
    pub num_classes: usize,
    pub input_channels: usize,
    pub blocks: Vec<BlockSpec>,
    /// Asserted against the counted layers at build time when present.
    pub expected_layers: Option<usize>,
    /// Asserted trainable-parameter range at build time when present.
    pub expected_params: Option<(usize, usize)>,
    pub init_seed: u64,
}

/// (inc blocks, ds blocks, stage width, branch maps per tap)
type StageRow = (usize, usize, usize, usize);

fn staged(stem_maps: usize, stages: &[StageRow]) -> Vec<BlockSpec> {
    let mut blocks = vec![BlockSpec { kind: BlockKind::Stem, out_maps: stem_maps, stride: 1, tap_maps: None }];
    for (i, &(inc, ds, width, branch)) in stages.iter().enumerate() {
        if i > 0 {
            blocks.push(BlockSpec::down(width));
        }
        for _ in 0..inc {
            blocks.push(BlockSpec::stage_block(BlockKind::IncRes, width, None));
        }
        for _ in 0..ds {
            blocks.push(BlockSpec::stage_block(BlockKind::DsRes, width, Some(branch)));
        }
    }
    blocks
}

impl NetworkConfig {
    /// The full 109-layer variant; a little over 10^6 trainable weights.
    pub fn cloudifier109(num_classes: usize) -> Self {
        NetworkConfig {
            variant_name: "cloudifier109".into(),
            num_classes,
            input_channels: 3,
            blocks: staged(16, &[(1, 1, 16, 8), (2, 2, 32, 8), (4, 3, 64, 6), (4, 3, 96, 4)]),
            expected_layers: Some(109),
            expected_params: Some((1_000_000, 1_400_000)),
            init_seed: 1,
        }
    }

    /// The reduced 50-layer variant (fewer modules, same structure).
    pub fn cloudifier50(num_classes: usize) -> Self {
        NetworkConfig {
            variant_name: "cloudifier50".into(),
            num_classes,
            input_channels: 3,
            blocks: staged(16, &[(1, 2, 16, 8), (1, 2, 32, 8), (2, 2, 64, 6)]),
            expected_layers: Some(50),
            expected_params: None,
            init_seed: 1,
        }
    }

    /// Desk-scale variant for tests and overfit experiments: two stages of
    /// 8 and 16 maps.
    pub fn micro(num_classes: usize) -> Self {
        NetworkConfig {
            variant_name: "micro".into(),
            num_classes,
            input_channels: 3,
            blocks: staged(8, &[(1, 1, 8, 8), (1, 1, 16, 8)]),
            expected_layers: Some(23),
            expected_params: None,
            init_seed: 1,
        }
    }

    pub fn by_name(variant: &str, num_classes: usize) -> Result<Self> {
        match variant {
            "cloudifier109" => Ok(Self::cloudifier109(num_classes)),
            "cloudifier50" => Ok(Self::cloudifier50(num_classes)),
            "micro" => Ok(Self::micro(num_classes)),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant '{other}' (expected cloudifier109, cloudifier50 or micro)"
            ))),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Build(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.input_channels == 0 {
            return Err(Error::Build("input_channels must be positive".into()));
        }
        match self.blocks.first() {
            Some(b) if b.kind == BlockKind::Stem && b.stride == 1 => {}
            _ => return Err(Error::Build("the first block must be a stride-1 stem".into())),
        }
        let mut taps = 0;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_maps == 0 {
                return Err(Error::Build(format!("block {i}: out_maps must be positive")));
            }
            let stride_ok = match b.kind {
                BlockKind::Downsample => b.stride == 2,
                _ => b.stride == 1,
            };
            if !stride_ok {
                return Err(Error::Build(format!(
                    "block {i}: {} blocks take stride {} (downsampling is a separate strided conv)",
                    b.kind.name(),
                    if b.kind == BlockKind::Downsample { 2 } else { 1 },
                )));
            }
            if b.tap_maps.is_some() && b.kind != BlockKind::DsRes {
                return Err(Error::Build(format!("block {i}: only ds_res blocks can be tapped")));
            }
            if b.tap_maps == Some(0) {
                return Err(Error::Build(format!("block {i}: tap maps must be positive")));
            }
            if i > 0 && b.kind == BlockKind::Stem {
                return Err(Error::Build(format!("block {i}: stem is only valid as the first block")));
            }
            taps += usize::from(b.tap_maps.is_some());
        }
        if taps == 0 {
            return Err(Error::Build("the network needs at least one tapped ds_res block".into()));
        }
        Ok(())
    }

    /// Product of all downsampling strides; inputs must be divisible by it.
    pub fn max_downsample(&self) -> usize {
        self.blocks.iter().filter(|b| b.kind == BlockKind::Downsample).map(|b| b.stride).product()
    }

    /// Ordered key=value lines fully determining the graph.
    pub fn to_descriptor(&self) -> String {
        let mut out = String::new();
        out.push_str("format=cloudifier-net-v1\n");
        out.push_str(&format!("variant={}\n", self.variant_name));
        out.push_str(&format!("classes={}\n", self.num_classes));
        out.push_str(&format!("input_channels={}\n", self.input_channels));
        out.push_str(&format!("seed={}\n", self.init_seed));
        if let Some(n) = self.expected_layers {
            out.push_str(&format!("layers={n}\n"));
        }
        if let Some((lo, hi)) = self.expected_params {
            out.push_str(&format!("params={lo}..{hi}\n"));
        }
        for b in &self.blocks {
            match b.tap_maps {
                Some(t) => out.push_str(&format!(
                    "block={} maps={} stride={} tap={}\n",
                    b.kind.name(),
                    b.out_maps,
                    b.stride,
                    t
                )),
                None => out.push_str(&format!(
                    "block={} maps={} stride={}\n",
                    b.kind.name(),
                    b.out_maps,
                    b.stride
                )),
            }
        }
        out
    }

    pub fn from_descriptor(text: &str) -> Result<Self> {
        let corrupt = |msg: String| Error::Build(format!("descriptor: {msg}"));
        let mut variant = None;
        let mut classes = None;
        let mut input_channels = None;
        let mut seed = 0u64;
        let mut expected_layers = None;
        let mut expected_params = None;
        let mut blocks = Vec::new();
        let mut saw_format = false;

        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| corrupt(format!("line {}: expected key=value, got '{line}'", ln + 1)))?;
            match key {
                "format" => {
                    if value != "cloudifier-net-v1" {
                        return Err(corrupt(format!("unsupported format '{value}'")));
                    }
                    saw_format = true;
                }
                "variant" => variant = Some(value.to_string()),
                "classes" => classes = Some(parse_usize(value).map_err(&corrupt)?),
                "input_channels" => input_channels = Some(parse_usize(value).map_err(&corrupt)?),
                "seed" => seed = value.parse().map_err(|_| corrupt(format!("bad seed '{value}'")))?,
                "layers" => expected_layers = Some(parse_usize(value).map_err(&corrupt)?),
                "params" => {
                    let (lo, hi) = value
                        .split_once("..")
                        .ok_or_else(|| corrupt(format!("bad params range '{value}'")))?;
                    expected_params =
                        Some((parse_usize(lo).map_err(&corrupt)?, parse_usize(hi).map_err(&corrupt)?));
                }
                "block" => {
                    let mut fields = value.split_whitespace();
                    let kind = fields
                        .next()
                        .and_then(BlockKind::parse)
                        .ok_or_else(|| corrupt(format!("bad block kind in '{value}'")))?;
                    let mut maps = None;
                    let mut stride = None;
                    let mut tap = None;
                    for f in fields {
                        let (k, v) = f
                            .split_once('=')
                            .ok_or_else(|| corrupt(format!("bad block field '{f}'")))?;
                        match k {
                            "maps" => maps = Some(parse_usize(v).map_err(&corrupt)?),
                            "stride" => stride = Some(parse_usize(v).map_err(&corrupt)?),
                            "tap" => tap = Some(parse_usize(v).map_err(&corrupt)?),
                            other => return Err(corrupt(format!("unknown block field '{other}'"))),
                        }
                    }
                    blocks.push(BlockSpec {
                        kind,
                        out_maps: maps.ok_or_else(|| corrupt("block without maps".into()))?,
                        stride: stride.ok_or_else(|| corrupt("block without stride".into()))?,
                        tap_maps: tap,
                    });
                }
                other => return Err(corrupt(format!("unknown key '{other}'"))),
            }
        }
        if !saw_format {
            return Err(corrupt("missing format line".into()));
        }
        let config = NetworkConfig {
            variant_name: variant.ok_or_else(|| corrupt("missing variant".into()))?,
            num_classes: classes.ok_or_else(|| corrupt("missing classes".into()))?,
            input_channels: input_channels.ok_or_else(|| corrupt("missing input_channels".into()))?,
            blocks,
            expected_layers,
            expected_params,
            init_seed: seed,
        };
        config.validate()?;
        Ok(config)
    }
}

fn parse_usize(s: &str) -> std::result::Result<usize, String> {
    s.parse().map_err(|_| format!("bad number '{s}'"))
}
