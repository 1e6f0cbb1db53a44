//! Per-channel batch normalisation over N×C×H×W activations.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalise with the statistics of the current batch and update the running ones.
    Training,
    /// Pure per-channel affine map built from the running statistics.
    Inference,
}

#[derive(Clone, Debug)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub epsilon: f64,
    pub momentum: f64,
    pub mode: NormMode,
}

impl BatchNormParams {
    /// gamma = 1, beta = 0, running statistics (0, 1).
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            epsilon: 1e-5,
            momentum: 0.1,
            mode: NormMode::Inference,
        }
    }
}

/// Per-channel mean and biased variance of a batch.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// What the training-mode backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
}

fn check_affine(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<[usize; 4]> {
    let dims = x.dims4()?;
    let c = dims[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(config_err!(
            "batchnorm sized for {:?}/{:?} channels but input has {c} channels",
            gamma.shape(),
            beta.shape()
        ));
    }
    Ok(dims)
}

pub fn batch_stats(x: &Tensor) -> Result<BatchStats> {
    let [n, c, h, w] = x.dims4()?;
    let count = (n * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for ni in 0..n {
            s += x.plane(ni, ch).iter().sum::<f64>();
        }
        let m = s / count;
        let mut v = 0.0;
        for ni in 0..n {
            v += x.plane(ni, ch).iter().map(|&a| (a - m) * (a - m)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    Ok(BatchStats { mean, var })
}

/// Training-mode forward: returns output, batch statistics and backward cache.
#[allow(clippy::needless_range_loop)]
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, BatchStats, NormCache)> {
    let [n, c, h, w] = check_affine(x, gamma, beta)?;
    if n * h * w < 2 {
        return Err(config_err!("training-mode batchnorm needs at least 2 values per channel, got {}", n * h * w));
    }
    let stats = batch_stats(x)?;
    let inv_std: Vec<f64> = stats.var.iter().map(|&v| 1.0 / libm::sqrt(v + eps)).collect();
    let mut x_hat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    let plane = h * w;
    {
        let (xd, xh, od) = (x.data(), x_hat.data_mut(), out.data_mut());
        for ni in 0..n {
            for ch in 0..c {
                let off = (ni * c + ch) * plane;
                let (m, is) = (stats.mean[ch], inv_std[ch]);
                let (g, b) = (gamma.data()[ch], beta.data()[ch]);
                for i in off..off + plane {
                    let v = (xd[i] - m) * is;
                    xh[i] = v;
                    od[i] = g * v + b;
                }
            }
        }
    }
    Ok((out, stats, NormCache { x_hat, inv_std }))
}

pub fn batch_norm_inference(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let [n, c, h, w] = check_affine(x, gamma, beta)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(config_err!("running statistics do not match {c} channels"));
    }
    let plane = h * w;
    let mut out = Tensor::zeros(x.shape());
    let (xd, od) = (x.data(), out.data_mut());
    for ch in 0..c {
        let scale = gamma.data()[ch] / libm::sqrt(running_var.data()[ch] + eps);
        let shift = beta.data()[ch] - running_mean.data()[ch] * scale;
        for ni in 0..n {
            let off = (ni * c + ch) * plane;
            for i in off..off + plane {
                od[i] = xd[i] * scale + shift;
            }
        }
    }
    Ok(out)
}

/// `running ← (1 − momentum)·running + momentum·batch`, biased variance for both.
pub fn update_running(running_mean: &mut Tensor, running_var: &mut Tensor, stats: &BatchStats, momentum: f64) {
    for (r, &b) in running_mean.data_mut().iter_mut().zip(&stats.mean) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
    for (r, &b) in running_var.data_mut().iter_mut().zip(&stats.var) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
}

/// Applies either mode according to `p.mode`, updating running statistics in training mode.
pub fn batchnorm2d(x: &Tensor, p: &mut BatchNormParams) -> Result<Tensor> {
    match p.mode {
        NormMode::Training => {
            let (out, stats, _) = batch_norm_train(x, &p.gamma, &p.beta, p.epsilon)?;
            update_running(&mut p.running_mean, &mut p.running_var, &stats, p.momentum);
            Ok(out)
        }
        NormMode::Inference => {
            batch_norm_inference(x, &p.gamma, &p.beta, &p.running_mean, &p.running_var, p.epsilon)
        }
    }
}

pub struct NormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Backward through batch statistics:
/// `dx = γ·inv_std/M · (M·g − Σg − x̂·Σ(g·x̂))`.
pub fn batch_norm_train_backward(cache: &NormCache, gamma: &Tensor, grad_out: &Tensor) -> Result<NormGrads> {
    let [n, c, h, w] = cache.x_hat.dims4()?;
    cache.x_hat.expect_same_shape(grad_out)?;
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let (xh, go) = (cache.x_hat.data(), grad_out.data());
    for ch in 0..c {
        for ni in 0..n {
            let off = (ni * c + ch) * plane;
            for i in off..off + plane {
                dbeta[ch] += go[i];
                dgamma[ch] += go[i] * xh[i];
            }
        }
    }
    let mut gx = Tensor::zeros(grad_out.shape());
    let gxd = gx.data_mut();
    for ch in 0..c {
        let k = gamma.data()[ch] * cache.inv_std[ch] / m;
        for ni in 0..n {
            let off = (ni * c + ch) * plane;
            for i in off..off + plane {
                gxd[i] = k * (m * go[i] - dbeta[ch] - xh[i] * dgamma[ch]);
            }
        }
    }
    Ok(NormGrads {
        input: gx,
        gamma: Tensor::from_vec(&[c], dgamma)?,
        beta: Tensor::from_vec(&[c], dbeta)?,
    })
}

pub fn batch_norm_inference_backward(
    x: &Tensor,
    gamma: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f64,
    grad_out: &Tensor,
) -> Result<NormGrads> {
    let [n, c, h, w] = x.dims4()?;
    x.expect_same_shape(grad_out)?;
    let plane = h * w;
    let mut gx = Tensor::zeros(x.shape());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let (xd, go, gxd) = (x.data(), grad_out.data(), gx.data_mut());
    for ch in 0..c {
        let inv_std = 1.0 / libm::sqrt(running_var.data()[ch] + eps);
        let scale = gamma.data()[ch] * inv_std;
        let mean = running_mean.data()[ch];
        for ni in 0..n {
            let off = (ni * c + ch) * plane;
            for i in off..off + plane {
                gxd[i] = go[i] * scale;
                dbeta[ch] += go[i];
                dgamma[ch] += go[i] * (xd[i] - mean) * inv_std;
            }
        }
    }
    Ok(NormGrads {
        input: gx,
        gamma: Tensor::from_vec(&[c], dgamma)?,
        beta: Tensor::from_vec(&[c], dbeta)?,
    })
}
