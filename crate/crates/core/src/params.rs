//! Registries for learnable tensors and batchnorm running statistics.
//!
//! Layers hold ids into these stores rather than tensors, so a layer reused
//! several times in one forward pass (the shared recursive branch) still owns
//! exactly one copy of each tensor.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{config_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a learnable tensor; weight decay only touches [`ParamKind::Weight`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(config_err!("parameter {name} registered twice"));
        }
        self.params.push(Param { name, value, kind });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StatsId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct RunningStats {
    pub name: String,
    pub mean: Tensor,
    pub var: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct StatsStore {
    stats: Vec<RunningStats>,
}

impl StatsStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fresh statistics (mean 0, variance 1) for `channels` channels.
    pub fn register(&mut self, name: impl Into<String>, channels: usize) -> Result<StatsId> {
        let name = name.into();
        if self.stats.iter().any(|s| s.name == name) {
            return Err(config_err!("running statistics {name} registered twice"));
        }
        self.stats.push(RunningStats {
            name,
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], 1.0),
        });
        Ok(StatsId(self.stats.len() - 1))
    }

    pub fn get(&self, id: StatsId) -> &RunningStats {
        &self.stats[id.0]
    }

    pub fn get_mut(&mut self, id: StatsId) -> &mut RunningStats {
        &mut self.stats[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &RunningStats> {
        self.stats.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut RunningStats> {
        self.stats.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }
}
