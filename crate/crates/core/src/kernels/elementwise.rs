//! Elementwise activations, dropout, residual addition and channel rescaling.

use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::error::{config_err, Result};
use crate::tensor::Tensor;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Passes the gradient where the input was strictly positive; `relu'(0) = 0`.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    x.zip_map(grad_out, |v, g| if v > 0.0 { g } else { 0.0 })
}

/// Logistic function evaluated without overflow for large `|x|`.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Uses the forward output: `σ' = σ(1 − σ)`.
pub fn sigmoid_backward(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    y.zip_map(grad_out, |s, g| g * s * (1.0 - s))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x * y)
}

/// Whether a stochastic layer draws from its random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout. Returns the output and, in training mode, the mask of
/// survivor multipliers (`0` or `1/(1−rate)`) used by the backward pass.
pub fn dropout(x: &Tensor, rate: f64, mode: Mode, rng: &mut dyn RngCore) -> Result<(Tensor, Option<Tensor>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(config_err!("dropout rate must lie in [0, 1), got {rate}"));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask_data: Vec<f64> = (0..x.numel()).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
    let mask = Tensor::from_vec(x.shape(), mask_data)?;
    let out = mul(x, &mask)?;
    Ok((out, Some(mask)))
}

fn check_scale(x: &Tensor, s: &Tensor) -> Result<[usize; 4]> {
    let dims = x.dims4()?;
    if s.shape() != [dims[0], dims[1], 1, 1] {
        return Err(config_err!(
            "channel scale must be {}×{}×1×1 for input {:?}, got {:?}",
            dims[0],
            dims[1],
            x.shape(),
            s.shape()
        ));
    }
    Ok(dims)
}

/// `out[n,c,h,w] = x[n,c,h,w] · s[n,c,0,0]`.
pub fn channel_scale(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let [_, _, h, w] = check_scale(x, s)?;
    let plane = h * w;
    let mut out = x.clone();
    for (chunk, &k) in out.data_mut().chunks_exact_mut(plane).zip(s.data()) {
        for v in chunk {
            *v *= k;
        }
    }
    Ok(out)
}

pub fn channel_scale_backward(x: &Tensor, s: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let [_, _, h, w] = check_scale(x, s)?;
    x.expect_same_shape(grad_out)?;
    let plane = h * w;
    let gx = channel_scale(grad_out, s)?;
    let gs: Vec<f64> = x
        .data()
        .chunks_exact(plane)
        .zip(grad_out.data().chunks_exact(plane))
        .map(|(xp, gp)| xp.iter().zip(gp).map(|(a, b)| a * b).sum())
        .collect();
    Ok((gx, Tensor::from_vec(s.shape(), gs)?))
}
