//! Unoptimised reference kernels.
//!
//! Straight nested loops over the defining sums, used to validate the
//! optimised kernels and, through [`FlopCounter`], the analytic cost model.
//! Nothing on the training path calls into this module.

use alloc::vec;

use crate::error::Result;
use crate::kernels::conv::{ConvGeom, ConvParams};
use crate::tensor::Tensor;

/// Tallies floating-point operations as the oracles execute them.
///
/// A multiply-accumulate counts as two. Zero-padded taps are visited and
/// counted like any other tap (the value they multiply is an implicit zero).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCounter {
    pub flops: u64,
}

pub fn conv2d_oracle(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    conv2d_oracle_counted(x, p, &mut FlopCounter::default())
}

pub fn conv2d_oracle_counted(x: &Tensor, p: &ConvParams, counter: &mut FlopCounter) -> Result<Tensor> {
    let g = ConvGeom::new(x, &p.weight, p.bias.as_ref(), p.spec)?;
    let mut out = Tensor::zeros(&g.output_shape());
    let [_, _, oh, ow] = g.output_shape();
    for n in 0..g.n {
        for co in 0..g.c_out {
            let group = co / g.cout_per_group;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = match &p.bias {
                        Some(b) => {
                            counter.flops += 1;
                            b.data()[co]
                        }
                        None => 0.0,
                    };
                    for cl in 0..g.cin_per_group {
                        let ci = group * g.cin_per_group + cl;
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                counter.flops += 2;
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy as usize >= g.h || ix as usize >= g.w {
                                    continue;
                                }
                                let xv = x.data()[((n * g.c_in + ci) * g.h + iy as usize) * g.w + ix as usize];
                                let wv = p.weight.data()[((co * g.cin_per_group + cl) * g.kh + ky) * g.kw + kx];
                                acc += wv * xv;
                            }
                        }
                    }
                    out.data_mut()[((n * g.c_out + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

fn at(x: &Tensor, n: usize, c: usize, h: usize, w: usize) -> f64 {
    let [_, cs, hs, ws] = x.dims4().unwrap();
    x.data()[((n * cs + c) * hs + h) * ws + w]
}

/// Training-mode batch normalisation written directly from its definition.
pub fn batchnorm_train_oracle(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let count = (n * h * w) as f64;
    let mut out = Tensor::zeros(x.shape());
    for ch in 0..c {
        let mut mean = 0.0;
        for ni in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    mean += at(x, ni, ch, y, xx);
                }
            }
        }
        mean /= count;
        let mut var = 0.0;
        for ni in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let d = at(x, ni, ch, y, xx) - mean;
                    var += d * d;
                }
            }
        }
        var /= count;
        for ni in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let v = (at(x, ni, ch, y, xx) - mean) / libm::sqrt(var + eps);
                    out.data_mut()[((ni * c + ch) * h + y) * w + xx] = gamma.data()[ch] * v + beta.data()[ch];
                }
            }
        }
    }
    Ok(out)
}

pub fn batchnorm_inference_oracle(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f64,
    counter: &mut FlopCounter,
) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let mut out = Tensor::zeros(x.shape());
    for ni in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = (at(x, ni, ch, y, xx) - mean.data()[ch]) / libm::sqrt(var.data()[ch] + eps);
                    // folded into one multiply and one add per element
                    counter.flops += 2;
                    out.data_mut()[((ni * c + ch) * h + y) * w + xx] = gamma.data()[ch] * v + beta.data()[ch];
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_oracle(x: &Tensor, counter: &mut FlopCounter) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let mut out = vec![0.0; n * c];
    for ni in 0..n {
        for ch in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    counter.flops += 1;
                    s += at(x, ni, ch, y, xx);
                }
            }
            out[ni * c + ch] = s / (h * w) as f64;
        }
    }
    Tensor::from_vec(&[n, c, 1, 1], out)
}

pub fn relu_oracle(x: &Tensor, counter: &mut FlopCounter) -> Tensor {
    counter.flops += x.numel() as u64;
    x.map(|v| v.max(0.0))
}

/// Textbook `1/(1+e^{−x})`, four operations per element.
pub fn sigmoid_oracle(x: &Tensor, counter: &mut FlopCounter) -> Tensor {
    counter.flops += 4 * x.numel() as u64;
    x.map(|v| 1.0 / (1.0 + libm::exp(-v)))
}
