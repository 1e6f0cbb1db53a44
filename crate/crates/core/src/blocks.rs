//! Exploration, backtrack and integrated residual blocks.
//!
//! An exploration block lifts its input with a depthwise-separable extractor
//! and then refines the result `R` times with one residual branch whose
//! parameters are reused at every iteration. The backtrack block squeezes the
//! refined map to a channel descriptor, runs it through a sigmoid-gated
//! bottleneck and rescales each channel. The integrated block chains the two
//! and adds a (possibly projected) shortcut before a final ReLU.

use alloc::format;

use rand::RngCore;

use crate::autograd::NodeId;
use crate::error::{config_err, Result};
use crate::kernels::ConvSpec;
use crate::layers::{BatchNormLayer, ConvLayer, ConvShape, Init, Pass};
use crate::params::{ParamStore, StatsStore};

/// Lowest bottleneck width used by the excitation path.
pub const DEFAULT_MIN_EXCITATION_WIDTH: usize = 4;

/// Shared size arguments for building one block.
#[derive(Clone, Copy, Debug)]
pub struct BlockShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub kernel: usize,
    pub recursion: usize,
    pub reduction: usize,
    pub min_excitation_width: usize,
    pub dropout_rate: f64,
}

/// Extractor: depthwise k×k (carrying the block stride) → BN → ReLU →
/// dropout → pointwise 1×1 → BN.
#[derive(Clone, Debug)]
pub struct ExtractParams {
    pub depthwise: ConvLayer,
    pub bn1: BatchNormLayer,
    pub dropout_rate: f64,
    pub pointwise: ConvLayer,
    pub bn2: BatchNormLayer,
}

impl ExtractParams {
    pub fn new(
        params: &mut ParamStore,
        stats: &mut StatsStore,
        rng: &mut dyn RngCore,
        name: &str,
        shape: &BlockShape,
    ) -> Result<Self> {
        let BlockShape { in_channels: cin, out_channels: cout, stride, kernel, dropout_rate, .. } = *shape;
        let dw = ConvShape {
            in_channels: cin,
            out_channels: cin,
            kernel,
            spec: ConvSpec::depthwise(cin, kernel, stride),
            bias: false,
        };
        let pw = ConvShape { in_channels: cin, out_channels: cout, kernel: 1, spec: ConvSpec::pointwise(1), bias: true };
        Ok(ExtractParams {
            depthwise: ConvLayer::new(params, rng, &format!("{name}.depthwise"), dw, Init::Kaiming)?,
            bn1: BatchNormLayer::new(params, stats, &format!("{name}.bn1"), cin)?,
            dropout_rate,
            pointwise: ConvLayer::new(params, rng, &format!("{name}.pointwise"), pw, Init::Kaiming)?,
            bn2: BatchNormLayer::new(params, stats, &format!("{name}.bn2"), cout)?,
        })
    }

    pub fn forward(&self, pass: &mut Pass<'_>, x: NodeId) -> Result<NodeId> {
        let h = self.depthwise.forward(pass, x)?;
        let h = self.bn1.forward(pass, h)?;
        let h = pass.tape.relu(h)?;
        let h = pass.tape.dropout(h, self.dropout_rate, pass.mode, pass.rng)?;
        let h = self.pointwise.forward(pass, h)?;
        self.bn2.forward(pass, h)
    }
}

/// Residual branch: depthwise k×k (stride 1) → BN → ReLU → pointwise → BN.
///
/// One instance serves every refinement iteration of its block, including
/// the running statistics of both batchnorms. The second batchnorm starts
/// with gamma = 0 so each refinement is initially the identity map.
#[derive(Clone, Debug)]
pub struct RecursiveParams {
    pub depthwise: ConvLayer,
    pub bn1: BatchNormLayer,
    pub pointwise: ConvLayer,
    pub bn2: BatchNormLayer,
}

impl RecursiveParams {
    pub fn new(
        params: &mut ParamStore,
        stats: &mut StatsStore,
        rng: &mut dyn RngCore,
        name: &str,
        channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        let dw = ConvShape {
            in_channels: channels,
            out_channels: channels,
            kernel,
            spec: ConvSpec::depthwise(channels, kernel, 1),
            bias: false,
        };
        let pw = ConvShape {
            in_channels: channels,
            out_channels: channels,
            kernel: 1,
            spec: ConvSpec::pointwise(1),
            bias: true,
        };
        Ok(RecursiveParams {
            depthwise: ConvLayer::new(params, rng, &format!("{name}.depthwise"), dw, Init::Kaiming)?,
            bn1: BatchNormLayer::new(params, stats, &format!("{name}.bn1"), channels)?,
            pointwise: ConvLayer::new(params, rng, &format!("{name}.pointwise"), pw, Init::Kaiming)?,
            bn2: BatchNormLayer::with_gamma(params, stats, &format!("{name}.bn2"), channels, 0.0)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.pointwise.out_channels
    }

    /// One refinement increment, without the residual add.
    pub fn forward(&self, pass: &mut Pass<'_>, x: NodeId) -> Result<NodeId> {
        let h = self.depthwise.forward(pass, x)?;
        let h = self.bn1.forward(pass, h)?;
        let h = pass.tape.relu(h)?;
        let h = self.pointwise.forward(pass, h)?;
        self.bn2.forward(pass, h)
    }
}

/// `F_0 = extract(x)`, then `F_i = F_{i−1} + recursive(F_{i−1})` for `i = 1..=recursion`.
pub fn dfs_eb_forward(
    pass: &mut Pass<'_>,
    x: NodeId,
    extract: &ExtractParams,
    recursive: &RecursiveParams,
    recursion: usize,
) -> Result<NodeId> {
    if extract.pointwise.out_channels != recursive.channels() {
        return Err(config_err!(
            "extractor produces {} channels but the recursive branch expects {}",
            extract.pointwise.out_channels,
            recursive.channels()
        ));
    }
    let mut f = extract.forward(pass, x)?;
    for _ in 0..recursion {
        let inc = recursive.forward(pass, f)?;
        f = pass.tape.add(f, inc)?;
    }
    Ok(f)
}

/// Squeeze-and-excite recalibration with bottleneck width `max(C/r, floor)`.
#[derive(Clone, Debug)]
pub struct BacktrackParams {
    /// 1×1 conv `C → hidden` with bias.
    pub w1: ConvLayer,
    /// 1×1 conv `hidden → C` with bias.
    pub w2: ConvLayer,
    pub reduction: usize,
    pub hidden: usize,
}

impl BacktrackParams {
    pub fn hidden_width(channels: usize, reduction: usize, min_width: usize) -> Result<usize> {
        if reduction == 0 || min_width == 0 {
            return Err(config_err!("reduction ratio and minimum excitation width must be at least 1"));
        }
        Ok((channels / reduction).max(min_width))
    }

    pub fn new(
        params: &mut ParamStore,
        rng: &mut dyn RngCore,
        name: &str,
        channels: usize,
        reduction: usize,
        min_width: usize,
    ) -> Result<Self> {
        let hidden = Self::hidden_width(channels, reduction, min_width)?;
        let fc = |i, o| ConvShape { in_channels: i, out_channels: o, kernel: 1, spec: ConvSpec::pointwise(1), bias: true };
        Ok(BacktrackParams {
            w1: ConvLayer::new(params, rng, &format!("{name}.w1"), fc(channels, hidden), Init::Kaiming)?,
            w2: ConvLayer::new(params, rng, &format!("{name}.w2"), fc(hidden, channels), Init::Kaiming)?,
            reduction,
            hidden,
        })
    }

    pub fn channels(&self) -> usize {
        self.w1.in_channels
    }

    /// The N×C×1×1 attention `s = σ(W2·relu(W1·z + b1) + b2)`, `z` the per-channel spatial mean.
    pub fn attention(&self, pass: &mut Pass<'_>, f: NodeId) -> Result<NodeId> {
        let [_, c, _, _] = pass.tape.value(f).dims4()?;
        if c != self.channels() {
            return Err(config_err!("backtrack block sized for {} channels, input has {c}", self.channels()));
        }
        let z = pass.tape.adaptive_avg_pool(f)?;
        let h = self.w1.forward(pass, z)?;
        let h = pass.tape.relu(h)?;
        let e = self.w2.forward(pass, h)?;
        pass.tape.sigmoid(e)
    }
}

/// `F ⊙ s`, one attention value per sample and channel.
pub fn dfs_bb_forward(pass: &mut Pass<'_>, f: NodeId, p: &BacktrackParams) -> Result<NodeId> {
    let s = p.attention(pass, f)?;
    pass.tape.channel_scale(f, s)
}

#[derive(Clone, Debug)]
pub enum ShortcutParams {
    Identity,
    /// Strided 1×1 conv (no bias) followed by batchnorm.
    Projection { conv: ConvLayer, bn: BatchNormLayer },
}

impl ShortcutParams {
    pub fn needs_projection(in_channels: usize, out_channels: usize, stride: usize) -> bool {
        in_channels != out_channels || stride != 1
    }

    pub fn identity(in_channels: usize, out_channels: usize, stride: usize) -> Result<Self> {
        if Self::needs_projection(in_channels, out_channels, stride) {
            return Err(config_err!(
                "identity shortcut cannot map {in_channels} channels at stride {stride} to {out_channels} channels"
            ));
        }
        Ok(ShortcutParams::Identity)
    }

    /// Identity when shapes already agree, otherwise a projection.
    pub fn new(
        params: &mut ParamStore,
        stats: &mut StatsStore,
        rng: &mut dyn RngCore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    ) -> Result<Self> {
        if !Self::needs_projection(in_channels, out_channels, stride) {
            return Ok(ShortcutParams::Identity);
        }
        let shape = ConvShape { in_channels, out_channels, kernel: 1, spec: ConvSpec::pointwise(stride), bias: false };
        Ok(ShortcutParams::Projection {
            conv: ConvLayer::new(params, rng, &format!("{name}.conv"), shape, Init::Kaiming)?,
            bn: BatchNormLayer::new(params, stats, &format!("{name}.bn"), out_channels)?,
        })
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, ShortcutParams::Identity)
    }
}

pub fn projection_shortcut(pass: &mut Pass<'_>, x: NodeId, p: &ShortcutParams) -> Result<NodeId> {
    match p {
        ShortcutParams::Identity => Ok(x),
        ShortcutParams::Projection { conv, bn } => {
            let h = conv.forward(pass, x)?;
            bn.forward(pass, h)
        }
    }
}

/// Learnable state of one integrated block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub extract: ExtractParams,
    pub recursive: RecursiveParams,
    pub recursion: usize,
    pub backtrack: BacktrackParams,
    pub shortcut: ShortcutParams,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl BlockParams {
    pub fn new(
        params: &mut ParamStore,
        stats: &mut StatsStore,
        rng: &mut dyn RngCore,
        name: &str,
        shape: &BlockShape,
    ) -> Result<Self> {
        if shape.kernel.is_multiple_of(2) {
            return Err(config_err!(
                "{name}: depthwise kernel {} must be odd so the main branch and shortcut agree in size",
                shape.kernel
            ));
        }
        if shape.stride == 0 {
            return Err(config_err!("{name}: stride must be at least 1"));
        }
        let extract = ExtractParams::new(params, stats, rng, &format!("{name}.extract"), shape)?;
        let recursive =
            RecursiveParams::new(params, stats, rng, &format!("{name}.recursive"), shape.out_channels, shape.kernel)?;
        let backtrack = BacktrackParams::new(
            params,
            rng,
            &format!("{name}.backtrack"),
            shape.out_channels,
            shape.reduction,
            shape.min_excitation_width,
        )?;
        let shortcut = ShortcutParams::new(
            params,
            stats,
            rng,
            &format!("{name}.shortcut"),
            shape.in_channels,
            shape.out_channels,
            shape.stride,
        )?;
        Ok(BlockParams {
            extract,
            recursive,
            recursion: shape.recursion,
            backtrack,
            shortcut,
            in_channels: shape.in_channels,
            out_channels: shape.out_channels,
            stride: shape.stride,
        })
    }
}

/// `relu(backtrack(explore(x)) + shortcut(x))`.
pub fn dfs_block_forward(pass: &mut Pass<'_>, x: NodeId, p: &BlockParams) -> Result<NodeId> {
    let explored = dfs_eb_forward(pass, x, &p.extract, &p.recursive, p.recursion)?;
    let recalibrated = dfs_bb_forward(pass, explored, &p.backtrack)?;
    let skip = projection_shortcut(pass, x, &p.shortcut)?;
    let sum = pass.tape.add(recalibrated, skip)?;
    pass.tape.relu(sum)
}
