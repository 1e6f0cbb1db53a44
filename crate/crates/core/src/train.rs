//! SGD with momentum, the cosine schedule, the epoch loop and evaluation.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::RngCore;

use crate::autograd::Tape;
use crate::data::{augment, AugmentPolicy, Dataset};
use crate::error::{config_err, Error, Result};
use crate::kernels::{self, Mode};
use crate::network::Model;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Also decay batchnorm scales and shifts and all biases.
    pub decay_all: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { base_lr: 0.1, momentum: 0.9, weight_decay: 5e-4, epochs: 100, batch_size: 128, decay_all: false }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(config_err!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(config_err!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.epochs == 0 {
            return Err(config_err!("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(config_err!("batch_size must be at least 2, got {}", self.batch_size));
        }
        Ok(())
    }

    /// Learning rate for 0-based `epoch`: `base · ½ · (1 + cos(π · epoch / epochs))`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let t = epoch as f64 / self.epochs as f64;
        self.base_lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t))
    }
}

/// Momentum buffers and progress counters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: OptimConfig,
    pub velocity: Vec<Tensor>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
}

impl OptimState {
    pub fn new(config: OptimConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let velocity = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Ok(OptimState { config, velocity, epoch: 0, step: 0 })
    }

    pub fn lr(&self) -> f64 {
        self.config.lr_at(self.epoch)
    }
}

/// `v ← μ·v + g + λ·θ`, then `θ ← θ − lr·v`. Decay touches only conv and
/// linear weights unless `decay_all` is set.
///
/// Nothing is modified if any gradient is non-finite.
pub fn sgd_step(params: &mut ParamStore, grads: &[Tensor], state: &mut OptimState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(config_err!("{} parameters, {} gradients, {} velocity buffers", params.len(), grads.len(), state.velocity.len()));
    }
    for ((_, p), g) in params.iter().zip(grads) {
        p.value.expect_same_shape(g)?;
        if !g.all_finite() {
            return Err(Error::Numeric(alloc::format!("non-finite gradient for {}", p.name)));
        }
    }
    let (mu, wd) = (state.config.momentum, state.config.weight_decay);
    for (((_, p), g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        let decay = if p.kind == ParamKind::Weight || state.config.decay_all { wd } else { 0.0 };
        for ((theta, &gi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = mu * *vi + gi + decay * *theta;
            *theta -= lr * *vi;
        }
    }
    state.step += 1;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

/// One pass over `data` in shuffled mini-batches. The stream drives the
/// shuffle, the augmentation and dropout, in that order per batch.
/// A trailing batch with a single sample is skipped, since batch
/// statistics are undefined for it.
pub fn train_epoch(
    model: &mut Model,
    data: &Dataset,
    state: &mut OptimState,
    policy: AugmentPolicy,
    rng: &mut dyn RngCore,
) -> Result<EpochStats> {
    let lr = state.lr();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
    for chunk in order.chunks(state.config.batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let (x, labels) = data.batch(chunk)?;
        let x = augment(&x, rng, policy)?;
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, x, Mode::Train, rng)?;
        let loss = tape.softmax_cross_entropy(logits, &labels)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric(alloc::format!(
                "loss became {value} at epoch {} step {}",
                state.epoch + 1,
                state.step + 1
            )));
        }
        let preds = crate::network::predict(tape.value(logits))?;
        correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        loss_sum += value * chunk.len() as f64;
        seen += chunk.len();
        let grads = tape.backward(loss)?.param_grads(&model.params);
        sgd_step(&mut model.params, &grads, state, lr)?;
    }
    state.epoch += 1;
    if seen == 0 {
        return Err(config_err!("training set yields no batch of at least 2 samples"));
    }
    Ok(EpochStats { lr, loss: loss_sum / seen as f64, accuracy: correct as f64 / seen as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    /// Fractions in [0, 1].
    pub top1: f64,
    pub top5: f64,
    pub loss: f64,
    pub count: usize,
}

/// Whether `label` is among the `k` largest entries of `row`, ties ranked by lower index.
pub fn in_top_k(row: &[f64], label: usize, k: usize) -> bool {
    let target = row[label];
    let ahead = row.iter().enumerate().filter(|&(i, &v)| v > target || (v == target && i < label)).count();
    ahead < k
}

/// Metrics from precomputed N×c logits.
pub fn metrics_from_logits(logits: &Tensor, labels: &[usize]) -> Result<EvalMetrics> {
    let [n, c] = logits.shape() else {
        return Err(config_err!("logits must be N×c, got {:?}", logits.shape()));
    };
    let (n, c) = (*n, *c);
    if n != labels.len() {
        return Err(config_err!("{n} logit rows but {} labels", labels.len()));
    }
    let loss = kernels::softmax_cross_entropy(logits, labels)?;
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    for (row, &l) in logits.data().chunks_exact(c).zip(labels) {
        top1 += in_top_k(row, l, 1) as usize;
        top5 += in_top_k(row, l, 5) as usize;
    }
    let n_f = n.max(1) as f64;
    Ok(EvalMetrics { top1: top1 as f64 / n_f, top5: top5 as f64 / n_f, loss, count: n })
}

/// Evaluation-mode metrics over `data` in batches of `batch_size`.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(config_err!("cannot evaluate on an empty dataset"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut parts = Vec::new();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = data.batch(chunk)?;
        parts.push(model.logits(&x)?);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    metrics_from_logits(&Tensor::concat_rows(&refs)?, &data.labels)
}
