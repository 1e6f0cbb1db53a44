//! Whole-model configuration, construction and forward pass.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{NodeId, Tape};
use crate::blocks::{dfs_block_forward, BlockParams, BlockShape, DEFAULT_MIN_EXCITATION_WIDTH};
use crate::error::{config_err, Result};
use crate::kernels::{ConvSpec, Mode};
use crate::layers::{BatchNormLayer, ConvLayer, ConvShape, Init, Pass, Stats};
use crate::params::{ParamStore, StatsStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub out_channels: usize,
    pub num_blocks: usize,
    /// Stride of the stage's first block; later blocks use stride 1.
    pub stride: usize,
    pub recursion_override: Option<usize>,
}

impl StageConfig {
    pub fn new(out_channels: usize, num_blocks: usize, stride: usize) -> Self {
        StageConfig { out_channels, num_blocks, stride, recursion_override: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageConfig>,
    pub reduction: usize,
    pub recursion: usize,
    pub dropout_rate: f64,
    pub num_classes: usize,
    pub depthwise_kernel: usize,
    pub min_excitation_width: usize,
}

impl ModelConfig {
    /// The reference desk configuration: stem 16, stages (16×3, s1), (32×3, s2),
    /// (64×3, s2), R = 2, r = 8, dropout 0.1.
    pub fn dt_tiny(input_channels: usize, num_classes: usize) -> Self {
        ModelConfig {
            input_channels,
            stem_channels: 16,
            stages: alloc::vec![StageConfig::new(16, 3, 1), StageConfig::new(32, 3, 2), StageConfig::new(64, 3, 2)],
            reduction: 8,
            recursion: 2,
            dropout_rate: 0.1,
            num_classes,
            depthwise_kernel: 3,
            min_excitation_width: DEFAULT_MIN_EXCITATION_WIDTH,
        }
    }

    /// Same network with every stage's recursion count set to `r`.
    pub fn with_recursion(mut self, r: usize) -> Self {
        self.recursion = r;
        for s in &mut self.stages {
            s.recursion_override = None;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_channels", self.input_channels),
            ("stem_channels", self.stem_channels),
            ("reduction", self.reduction),
            ("depthwise_kernel", self.depthwise_kernel),
            ("min_excitation_width", self.min_excitation_width),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(config_err!("{field} must be positive"));
            }
        }
        if self.num_classes < 2 {
            return Err(config_err!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.depthwise_kernel.is_multiple_of(2) {
            return Err(config_err!("depthwise_kernel must be odd, got {}", self.depthwise_kernel));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(config_err!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if self.stages.is_empty() {
            return Err(config_err!("stages must contain at least one stage"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.out_channels == 0 {
                return Err(config_err!("stages[{i}].out_channels must be positive"));
            }
            if s.num_blocks == 0 {
                return Err(config_err!("stages[{i}].num_blocks must be at least 1"));
            }
            if s.stride != 1 && s.stride != 2 {
                return Err(config_err!("stages[{i}].stride must be 1 or 2, got {}", s.stride));
            }
        }
        Ok(())
    }

    pub fn stage_recursion(&self, stage: usize) -> usize {
        self.stages[stage].recursion_override.unwrap_or(self.recursion)
    }

    /// Product of stage strides; inputs must be at least this large on each side.
    pub fn downsample_factor(&self) -> usize {
        self.stages.iter().map(|s| s.stride).product()
    }

    pub fn final_channels(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, |s| s.out_channels)
    }

    /// Block shapes in execution order.
    pub fn block_shapes(&self) -> Vec<BlockShape> {
        let mut shapes = Vec::new();
        let mut c_in = self.stem_channels;
        for (si, stage) in self.stages.iter().enumerate() {
            for b in 0..stage.num_blocks {
                shapes.push(BlockShape {
                    in_channels: c_in,
                    out_channels: stage.out_channels,
                    stride: if b == 0 { stage.stride } else { 1 },
                    kernel: self.depthwise_kernel,
                    recursion: self.stage_recursion(si),
                    reduction: self.reduction,
                    min_excitation_width: self.min_excitation_width,
                    dropout_rate: self.dropout_rate,
                });
                c_in = stage.out_channels;
            }
        }
        shapes
    }
}

/// Layer wiring of a built model; parameter values live in the [`Model`]'s stores.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub stem_conv: ConvLayer,
    pub stem_bn: BatchNormLayer,
    pub blocks: Vec<BlockParams>,
    /// Linear classifier expressed as a 1×1 convolution on the pooled features.
    pub head: ConvLayer,
    pub num_classes: usize,
}

impl Architecture {
    pub fn forward(&self, pass: &mut Pass<'_>, x: NodeId) -> Result<NodeId> {
        let n = pass.tape.value(x).dims4()?[0];
        let h = self.stem_conv.forward(pass, x)?;
        let h = self.stem_bn.forward(pass, h)?;
        let mut h = pass.tape.relu(h)?;
        for block in &self.blocks {
            h = dfs_block_forward(pass, h, block)?;
        }
        let pooled = pass.tape.adaptive_avg_pool(h)?;
        let logits = self.head.forward(pass, pooled)?;
        pass.tape.reshape(logits, &[n, self.num_classes])
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub params: ParamStore,
    pub stats: StatsStore,
}

/// Builds a model with parameters drawn from a stream seeded by `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let mut stats = StatsStore::new();
    let stem = ConvShape {
        in_channels: cfg.input_channels,
        out_channels: cfg.stem_channels,
        kernel: 3,
        spec: ConvSpec::new(1, 1, 1),
        bias: false,
    };
    let stem_conv = ConvLayer::new(&mut params, &mut rng, "stem.conv", stem, Init::Kaiming)?;
    let stem_bn = BatchNormLayer::new(&mut params, &mut stats, "stem.bn", cfg.stem_channels)?;
    let mut blocks = Vec::new();
    for (i, shape) in cfg.block_shapes().iter().enumerate() {
        blocks.push(BlockParams::new(&mut params, &mut stats, &mut rng, &format!("blocks.{i}"), shape)?);
    }
    let head_shape = ConvShape {
        in_channels: cfg.final_channels(),
        out_channels: cfg.num_classes,
        kernel: 1,
        spec: ConvSpec::pointwise(1),
        bias: true,
    };
    let head = ConvLayer::new(&mut params, &mut rng, "head", head_shape, Init::Lecun)?;
    Ok(Model {
        config: cfg.clone(),
        arch: Architecture { stem_conv, stem_bn, blocks, head, num_classes: cfg.num_classes },
        params,
        stats,
    })
}

impl Model {
    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.dims4()?;
        if c != self.config.input_channels {
            return Err(config_err!("model expects {} input channels, batch has {c}", self.config.input_channels));
        }
        let f = self.config.downsample_factor();
        if h < f || w < f {
            return Err(config_err!("input {h}×{w} is smaller than the total downsampling factor {f}"));
        }
        Ok(())
    }

    /// Records a forward pass on `tape` and returns the N×c logits node.
    ///
    /// Training mode uses batch statistics and folds them into the running
    /// estimates; evaluation mode uses the running estimates only.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        x: Tensor,
        mode: Mode,
        rng: &mut dyn rand::RngCore,
    ) -> Result<NodeId> {
        self.check_input(&x)?;
        let xn = tape.constant(x);
        let stats = match mode {
            Mode::Train => Stats::Tracking(&mut self.stats),
            Mode::Eval => Stats::Frozen(&self.stats),
        };
        let mut pass = Pass { tape, params: &self.params, stats, mode, rng };
        self.arch.forward(&mut pass, xn)
    }

    /// Evaluation-mode forward returning plain logits.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        // evaluation mode never draws from the stream
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pass =
            Pass { tape: &mut tape, params: &self.params, stats: Stats::Frozen(&self.stats), mode: Mode::Eval, rng: &mut rng };
        let out = self.arch.forward(&mut pass, xn)?;
        Ok(tape.value(out).clone())
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }
}

/// Per-row argmax; ties go to the lowest index.
pub fn predict(logits: &Tensor) -> Result<Vec<usize>> {
    let [_, c] = logits.shape() else {
        return Err(config_err!("logits must be N×c, got {:?}", logits.shape()));
    };
    Ok(logits
        .data()
        .chunks_exact(*c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predict_examples() {
        let l = Tensor::from_vec(&[3, 3], alloc::vec![0.1, 0.9, 0.3, 2.0, 2.0, 2.0, -1.0, -3.0, 5.0]).unwrap();
        assert_eq!(predict(&l).unwrap(), [1, 0, 2]);
        let shifted = l.map(|v| v + 17.25);
        assert_eq!(predict(&shifted).unwrap(), [1, 0, 2]);
    }

    #[test]
    fn config_validation_names_fields() {
        let mut cfg = ModelConfig::dt_tiny(3, 10);
        assert!(cfg.validate().is_ok());
        cfg.num_classes = 1;
        assert!(alloc::format!("{}", cfg.validate().unwrap_err()).contains("num_classes"));
        let mut cfg = ModelConfig::dt_tiny(3, 10);
        cfg.stages[1].stride = 3;
        assert!(alloc::format!("{}", cfg.validate().unwrap_err()).contains("stages[1].stride"));
        let mut cfg = ModelConfig::dt_tiny(3, 10);
        cfg.depthwise_kernel = 4;
        assert!(cfg.validate().is_err());
    }
}
