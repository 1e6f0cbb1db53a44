#![allow(dead_code)]

use deeptraverse_core::autograd::{NodeId, Tape};
use deeptraverse_core::layers::{Pass, Stats};
use deeptraverse_core::params::{ParamStore, StatsStore};
use deeptraverse_core::{Mode, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Moves every parameter and running statistic away from its structured initial value.
pub fn randomize(params: &mut ParamStore, stats: &mut StatsStore, seed: u64) {
    deeptraverse_core::gradcheck::suite::randomize(params, stats, &mut rng(seed));
}

/// Fixed random projection of `out` to a scalar, so every output element matters.
pub fn project(tape: &mut Tape, out: NodeId, seed: u64) -> deeptraverse_core::Result<NodeId> {
    let shape = tape.value(out).shape().to_vec();
    let w = Tensor::randn(&shape, 1.0, &mut rng(seed));
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// An evaluation-mode pass that never draws randomness.
pub fn eval_pass<'a>(
    tape: &'a mut Tape,
    params: &'a ParamStore,
    stats: &'a StatsStore,
    r: &'a mut ChaCha8Rng,
) -> Pass<'a> {
    Pass { tape, params, stats: Stats::Frozen(stats), mode: Mode::Eval, rng: r }
}

/// Random batchnorm scales, everything else at its initial value.
pub fn randomize_norm_scales(params: &mut ParamStore, seed: u64) {
    deeptraverse_core::gradcheck::suite::randomize_norm_scales(params, &mut rng(seed));
}
