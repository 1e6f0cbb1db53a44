//! Finite-difference verification of tape gradients.
//!
//! The stencil is central, `(f(θ + h·e) − f(θ − h·e)) / 2h`, except where a
//! ReLU changes side between the two probes. The objective is not
//! differentiable inside such a window and the central quotient mixes two
//! pieces, so a one-sided stencil on the side that shares θ's ReLU pattern
//! (the piece the tape differentiated) is used instead, with the same step:
//! second order through θ, θ ± h and θ ± 2h when θ ± 2h is still on that
//! piece, first order otherwise. Such coordinates are counted in the report.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{value_and_grad, NodeId, Tape};
use crate::error::Result;
use crate::params::ParamStore;

pub mod suite;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Coordinates sampled per tensor; smaller tensors are checked exhaustively.
    pub coords_per_tensor: usize,
    /// Seeds the coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, coords_per_tensor: 200, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    /// Elements in the tensor.
    pub numel: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst coordinate with its analytic and numeric values.
    pub worst: (usize, f64, f64),
    /// Coordinates whose window straddled a ReLU kink and used a one-sided stencil.
    pub one_sided: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    /// Set when the objective produced a non-finite value.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.failure.is_none() && self.max_rel_err < tol
    }

    pub fn coordinates(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }

    pub fn one_sided(&self) -> usize {
        self.tensors.iter().map(|t| t.one_sided).sum()
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate(
    store: &ParamStore,
    objective: &impl Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
) -> Result<(f64, Vec<u64>)> {
    let mut tape = Tape::new();
    let out = objective(&mut tape, store)?;
    Ok((tape.value(out).data()[0], tape.relu_pattern()))
}

/// Compares the tape gradient of a deterministic scalar objective with finite
/// differences on sampled coordinates of every parameter.
pub fn grad_check(
    store: &ParamStore,
    objective: impl Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    let (_, analytic) = value_and_grad(store, &objective)?;
    let (centre, pattern) = evaluate(store, &objective)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport { tensors: Vec::new(), max_rel_err: 0.0, failure: None };
    for (id, param) in store.iter() {
        let numel = param.value.numel();
        let coords: Vec<usize> = if numel <= cfg.coords_per_tensor {
            (0..numel).collect()
        } else {
            let mut picked = index::sample(&mut rng, numel, cfg.coords_per_tensor).into_vec();
            picked.sort_unstable();
            picked
        };
        let mut check = TensorCheck {
            name: param.name.clone(),
            numel: param.value.numel(),
            checked: 0,
            max_rel_err: 0.0,
            worst: (0, 0.0, 0.0),
            one_sided: 0,
        };
        for &i in &coords {
            let original = param.value.data()[i];
            let (up, down) = (original + cfg.step, original - cfg.step);
            work.get_mut(id).data_mut()[i] = up;
            let (plus, plus_pattern) = evaluate(&work, &objective)?;
            work.get_mut(id).data_mut()[i] = down;
            let (minus, minus_pattern) = evaluate(&work, &objective)?;
            work.get_mut(id).data_mut()[i] = original;
            if !plus.is_finite() || !minus.is_finite() {
                report.failure = Some(format!("objective is not finite when perturbing {}[{i}]", param.name));
                report.max_rel_err = f64::INFINITY;
                return Ok(report);
            }
            // divide by the step actually taken, which differs from h by the rounding of θ ± h
            let (same_up, same_down) = (plus_pattern == pattern, minus_pattern == pattern);
            let numeric = if same_up != same_down {
                check.one_sided += 1;
                let (dir, near) = if same_up { (1.0, plus) } else { (-1.0, minus) };
                let s1 = if same_up { up - original } else { down - original };
                let far_theta = original + dir * 2.0 * cfg.step;
                work.get_mut(id).data_mut()[i] = far_theta;
                let (far, far_pattern) = evaluate(&work, &objective)?;
                work.get_mut(id).data_mut()[i] = original;
                if far_pattern == pattern && far.is_finite() {
                    // second order through (0, f(θ)), (s1, near), (s2, far)
                    let s2 = far_theta - original;
                    -(s1 + s2) / (s1 * s2) * centre + s2 / (s1 * (s2 - s1)) * near - s1 / (s2 * (s2 - s1)) * far
                } else {
                    (near - centre) / s1
                }
            } else {
                (plus - minus) / (up - down)
            };
            let a = analytic[id.index()].data()[i];
            let err = relative_error(a, numeric);
            if err > check.max_rel_err || check.checked == 0 {
                check.max_rel_err = err;
                check.worst = (i, a, numeric);
            }
            check.checked += 1;
        }
        report.max_rel_err = report.max_rel_err.max(check.max_rel_err);
        report.tensors.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamId, ParamKind};
    use rand::Rng;
    use crate::tensor::Tensor;

    fn square_sum(theta: ParamId) -> impl Fn(&mut Tape, &ParamStore) -> Result<NodeId> {
        move |tape, s| {
            let t = tape.param(s, theta);
            let sq = tape.mul(t, t)?;
            tape.sum(sq)
        }
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        // central differences are exact for a quadratic; only roundoff in f remains,
        // so keep f small and |θ| away from zero
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values = (0..24)
            .map(|_| {
                let m: f64 = rng.gen_range(0.5..1.5);
                if rng.gen_bool(0.5) { m } else { -m }
            })
            .collect();
        let mut store = ParamStore::new();
        let theta = store.register("theta", Tensor::from_vec(&[24], values).unwrap(), ParamKind::Weight).unwrap();
        let report = grad_check(&store, square_sum(theta), GradCheckConfig::default()).unwrap();
        assert_eq!(report.coordinates(), 24);
        assert!(report.passes(1e-9), "{report:?}");
    }

    #[test]
    fn large_tensors_are_sampled() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let theta = store.register("theta", Tensor::randn(&[500], 1.0, &mut rng), ParamKind::Weight).unwrap();
        let report = grad_check(&store, square_sum(theta), GradCheckConfig::default()).unwrap();
        assert_eq!(report.coordinates(), 200);
        assert_eq!(report.tensors[0].checked, 200);
    }

    #[test]
    fn kinks_inside_the_window_use_the_matching_side() {
        // θ sits 3e-6 above the kink of relu, so θ − h is on the other side
        let mut store = ParamStore::new();
        let theta = store.register("theta", Tensor::from_vec(&[2], alloc::vec![3e-6, 0.7]).unwrap(), ParamKind::Weight).unwrap();
        let report = grad_check(
            &store,
            |tape, s| {
                let t = tape.param(s, theta);
                let r = tape.relu(t)?;
                let sq = tape.mul(t, t)?;
                let f = tape.add(r, sq)?;
                tape.sum(f)
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.one_sided(), 1);
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-15);
    }
}
