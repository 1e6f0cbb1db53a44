//! Parameterised layers wired to the tape, plus the forward-pass context.

use alloc::format;
use alloc::string::String;

use rand::RngCore;

use crate::autograd::{NodeId, Tape};
use crate::error::{config_err, Result};
use crate::kernels::{self, conv::ConvSpec, Mode};
use crate::params::{ParamId, ParamKind, ParamStore, StatsId, StatsStore};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Access to running statistics during a pass.
pub enum Stats<'a> {
    /// Read-only; training-mode batchnorm still normalises with batch statistics.
    Frozen(&'a StatsStore),
    /// Training-mode batchnorm folds each batch into the running estimates.
    Tracking(&'a mut StatsStore),
}

impl Stats<'_> {
    fn store(&self) -> &StatsStore {
        match self {
            Stats::Frozen(s) => s,
            Stats::Tracking(s) => s,
        }
    }
}

/// Everything a layer needs to record itself on a tape.
pub struct Pass<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a ParamStore,
    pub stats: Stats<'a>,
    pub mode: Mode,
    pub rng: &'a mut dyn RngCore,
}

impl Pass<'_> {
    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.tape.param(self.params, id)
    }
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Gaussian with std `sqrt(2 / fan_in)`.
    Kaiming,
    /// Gaussian with std `sqrt(1 / fan_in)`.
    Lecun,
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Shape-level description of a convolution, enough to build or cost it.
#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub spec: ConvSpec,
    pub bias: bool,
}

impl ConvLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut dyn RngCore,
        name: &str,
        shape: ConvShape,
        init: Init,
    ) -> Result<Self> {
        let ConvShape { in_channels, out_channels, kernel, spec, bias } = shape;
        if in_channels == 0 || out_channels == 0 || kernel == 0 {
            return Err(config_err!("{name}: channel counts and kernel size must be positive"));
        }
        if spec.groups == 0 || in_channels % spec.groups != 0 || out_channels % spec.groups != 0 {
            return Err(config_err!(
                "{name}: groups {} must divide {in_channels} input and {out_channels} output channels",
                spec.groups
            ));
        }
        let per_group = in_channels / spec.groups;
        let fan_in = (per_group * kernel * kernel) as f64;
        let std = match init {
            Init::Kaiming => libm::sqrt(2.0 / fan_in),
            Init::Lecun => libm::sqrt(1.0 / fan_in),
        };
        let w = Tensor::randn(&[out_channels, per_group, kernel, kernel], std, rng);
        let weight = store.register(format!("{name}.weight"), w, ParamKind::Weight)?;
        let bias = if bias {
            Some(store.register(format!("{name}.bias"), Tensor::zeros(&[out_channels]), ParamKind::Bias)?)
        } else {
            None
        };
        Ok(ConvLayer { weight, bias, spec, kernel, in_channels, out_channels })
    }

    pub fn shape(&self) -> ConvShape {
        ConvShape {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            spec: self.spec,
            bias: self.bias.is_some(),
        }
    }

    pub fn forward(&self, pass: &mut Pass<'_>, x: NodeId) -> Result<NodeId> {
        let w = pass.param(self.weight);
        let b = self.bias.map(|b| pass.param(b));
        pass.tape.conv2d(x, w, b, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormLayer {
    pub fn new(params: &mut ParamStore, stats: &mut StatsStore, name: &str, channels: usize) -> Result<Self> {
        Self::with_gamma(params, stats, name, channels, 1.0)
    }

    pub fn with_gamma(
        params: &mut ParamStore,
        stats: &mut StatsStore,
        name: &str,
        channels: usize,
        gamma: f64,
    ) -> Result<Self> {
        Ok(BatchNormLayer {
            gamma: params.register(format!("{name}.gamma"), Tensor::full(&[channels], gamma), ParamKind::NormScale)?,
            beta: params.register(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamKind::NormShift)?,
            stats: stats.register(String::from(name), channels)?,
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }

    pub fn forward(&self, pass: &mut Pass<'_>, x: NodeId) -> Result<NodeId> {
        let gamma = pass.param(self.gamma);
        let beta = pass.param(self.beta);
        match pass.mode {
            Mode::Train => {
                let (out, batch) = pass.tape.batch_norm_train(x, gamma, beta, self.eps)?;
                if let Stats::Tracking(store) = &mut pass.stats {
                    let rs = store.get_mut(self.stats);
                    kernels::update_running(&mut rs.mean, &mut rs.var, &batch, self.momentum);
                }
                Ok(out)
            }
            Mode::Eval => {
                let rs = pass.stats.store().get(self.stats);
                let (mean, var) = (rs.mean.clone(), rs.var.clone());
                pass.tape.batch_norm_inference(x, gamma, beta, &mean, &var, self.eps)
            }
        }
    }
}
