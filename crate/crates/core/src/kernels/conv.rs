//! Grouped 2-D convolution with zero padding.
//!
//! Every output element accumulates its taps in (input channel, ky, kx)
//! order starting from the bias, the same order the naive oracle uses, so the
//! optimised and naive paths agree bit for bit.

use alloc::vec::Vec;

use crate::error::{config_err, Result};
use crate::tensor::Tensor;

/// Stride, zero padding and group count of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvSpec { stride, padding, groups }
    }

    /// `k×k` depthwise filter over `channels`, padded to keep the size at stride 1.
    pub const fn depthwise(channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec { stride, padding: (kernel - 1) / 2, groups: channels }
    }

    pub const fn pointwise(stride: usize) -> Self {
        ConvSpec { stride, padding: 0, groups: 1 }
    }

    /// Output extent along one spatial axis.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(config_err!("convolution stride must be at least 1"));
        }
        let padded = input + 2 * self.padding;
        if padded < kernel {
            return Err(config_err!(
                "kernel {kernel} does not fit input extent {input} with padding {}",
                self.padding
            ));
        }
        Ok((padded - kernel) / self.stride + 1)
    }
}

/// A convolution's learnable tensors together with its geometry.
#[derive(Clone, Debug)]
pub struct ConvParams {
    /// `C_out × C_in/groups × k × k`.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub spec: ConvSpec,
}

/// Validated sizes of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub cin_per_group: usize,
    pub cout_per_group: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Self> {
        let [n, c_in, h, w] = x.dims4()?;
        let [c_out, cin_per_group, kh, kw] = weight
            .dims4()
            .map_err(|_| config_err!("convolution weight must be rank 4, got {:?}", weight.shape()))?;
        if spec.groups == 0 || c_in % spec.groups != 0 || c_out % spec.groups != 0 {
            return Err(config_err!(
                "groups {} must divide input channels {c_in} and output channels {c_out}",
                spec.groups
            ));
        }
        if cin_per_group != c_in / spec.groups {
            return Err(config_err!(
                "weight expects {cin_per_group} input channels per group but input has {c_in} channels in {} groups",
                spec.groups
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(config_err!("bias shape {:?} does not match output channels {c_out}", b.shape()));
            }
        }
        let oh = spec.output_extent(h, kh)?;
        let ow = spec.output_extent(w, kw)?;
        Ok(ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            cin_per_group,
            cout_per_group: c_out / spec.groups,
            kh,
            kw,
            oh,
            ow,
            stride: spec.stride,
            pad: spec.padding,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.c_out, self.oh, self.ow]
    }

    fn is_plain_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Range of output columns whose input column `ox*s + kx - pad` is in bounds.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        valid_range(self.w, self.ow, self.stride, self.pad, kx)
    }

    fn valid_rows(&self, ky: usize) -> (usize, usize) {
        valid_range(self.h, self.oh, self.stride, self.pad, ky)
    }
}

fn valid_range(input: usize, output: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    // smallest o with o*s + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // largest o with o*s + k - pad <= input - 1
    let hi = if input + pad < k + 1 { 0 } else { ((input + pad - k - 1) / stride + 1).min(output) };
    (lo.min(hi), hi)
}

pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    conv2d_forward(x, &p.weight, p.bias.as_ref(), p.spec)
}

pub fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
    let g = ConvGeom::new(x, weight, bias, spec)?;
    let mut out = Tensor::zeros(&g.output_shape());
    let (xd, wd) = (x.data(), weight.data());
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let taps = g.kh * g.kw;
    let od = out.data_mut();
    for n in 0..g.n {
        for co in 0..g.c_out {
            let group = co / g.cout_per_group;
            let dst = &mut od[(n * g.c_out + co) * out_plane..][..out_plane];
            if let Some(b) = bias {
                dst.fill(b.data()[co]);
            }
            for cl in 0..g.cin_per_group {
                let ci = group * g.cin_per_group + cl;
                let src = &xd[(n * g.c_in + ci) * in_plane..][..in_plane];
                let wbase = (co * g.cin_per_group + cl) * taps;
                if g.is_plain_pointwise() {
                    let wv = wd[wbase];
                    for (o, &i) in dst.iter_mut().zip(src) {
                        *o += wv * i;
                    }
                    continue;
                }
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.valid_rows(ky);
                    for kx in 0..g.kw {
                        let wv = wd[wbase + ky * g.kw + kx];
                        let (ox0, ox1) = g.valid_cols(kx);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let row = &mut dst[oy * g.ow..][ox0..ox1];
                            let ix0 = ox0 * g.stride + kx - g.pad;
                            let srow = &src[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                for (o, &i) in row.iter_mut().zip(&srow[ix0..]) {
                                    *o += wv * i;
                                }
                            } else {
                                for (j, o) in row.iter_mut().enumerate() {
                                    *o += wv * srow[ix0 + j * g.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub struct ConvGrads {
    /// `None` when the caller did not ask for the input gradient.
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    with_bias: bool,
    need_input: bool,
    spec: ConvSpec,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    let g = ConvGeom::new(x, weight, None, spec)?;
    if grad_out.shape() != g.output_shape() {
        return Err(config_err!(
            "output gradient shape {:?} does not match convolution output {:?}",
            grad_out.shape(),
            g.output_shape()
        ));
    }
    let mut gx = Tensor::zeros(if need_input { x.shape() } else { &[1] });
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = with_bias.then(|| Tensor::zeros(&[g.c_out]));
    let (xd, wd, god) = (x.data(), weight.data(), grad_out.data());
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let taps = g.kh * g.kw;
    let gxd = gx.data_mut();
    let gwd = gw.data_mut();
    for n in 0..g.n {
        for co in 0..g.c_out {
            let group = co / g.cout_per_group;
            let go = &god[(n * g.c_out + co) * out_plane..][..out_plane];
            if let Some(gb) = gb.as_mut() {
                gb.data_mut()[co] += go.iter().sum::<f64>();
            }
            for cl in 0..g.cin_per_group {
                let ci = group * g.cin_per_group + cl;
                let src_off = (n * g.c_in + ci) * in_plane;
                let wbase = (co * g.cin_per_group + cl) * taps;
                if g.is_plain_pointwise() {
                    let wv = wd[wbase];
                    let src = &xd[src_off..][..in_plane];
                    gwd[wbase] += go.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                    if !need_input {
                        continue;
                    }
                    for (d, &o) in gxd[src_off..][..in_plane].iter_mut().zip(go) {
                        *d += wv * o;
                    }
                    continue;
                }
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.valid_rows(ky);
                    for kx in 0..g.kw {
                        let widx = wbase + ky * g.kw + kx;
                        let wv = wd[widx];
                        let (ox0, ox1) = g.valid_cols(kx);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &go[oy * g.ow..][ox0..ox1];
                            let ix0 = ox0 * g.stride + kx - g.pad;
                            let row_off = src_off + iy * g.w;
                            if g.stride == 1 {
                                let srow = &xd[row_off + ix0..][..grow.len()];
                                acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                                if !need_input {
                                    continue;
                                }
                                let drow = &mut gxd[row_off + ix0..][..grow.len()];
                                for (d, &o) in drow.iter_mut().zip(grow) {
                                    *d += wv * o;
                                }
                            } else {
                                for (j, &o) in grow.iter().enumerate() {
                                    let idx = row_off + ix0 + j * g.stride;
                                    acc += o * xd[idx];
                                    if need_input {
                                        gxd[idx] += wv * o;
                                    }
                                }
                            }
                        }
                        gwd[widx] += acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads { input: need_input.then_some(gx), weight: gw, bias: gb })
}

/// Spatial output extents for an input of `h × w`.
pub fn conv_output_hw(h: usize, w: usize, kernel: usize, spec: ConvSpec) -> Result<(usize, usize)> {
    Ok((spec.output_extent(h, kernel)?, spec.output_extent(w, kernel)?))
}

/// Fills a pointwise weight of shape `c_out × c_in × 1 × 1` from a row-major matrix.
pub fn pointwise_weight(c_out: usize, c_in: usize, values: Vec<f64>) -> Result<Tensor> {
    Tensor::from_vec(&[c_out, c_in, 1, 1], values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn valid_ranges_cover_in_bounds_taps() {
        for &(input, stride, pad, k) in &[(5, 1, 1, 3), (8, 2, 1, 3), (7, 2, 0, 1), (3, 3, 2, 5)] {
            let spec = ConvSpec::new(stride, pad, 1);
            let out = spec.output_extent(input, k).unwrap();
            for kk in 0..k {
                let (lo, hi) = valid_range(input, out, stride, pad, kk);
                for o in 0..out {
                    let i = (o * stride + kk) as isize - pad as isize;
                    let inside = i >= 0 && (i as usize) < input;
                    assert_eq!(inside, o >= lo && o < hi, "input {input} stride {stride} pad {pad} k {kk} o {o}");
                }
            }
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        let x = Tensor::zeros(&[1, 4, 5, 5]);
        let w = Tensor::zeros(&[4, 1, 3, 3]);
        assert!(conv2d_forward(&x, &w, None, ConvSpec::new(1, 1, 4)).is_ok());
        assert!(conv2d_forward(&x, &w, None, ConvSpec::new(1, 1, 3)).is_err());
        assert!(conv2d_forward(&x, &w, None, ConvSpec::new(0, 1, 4)).is_err());
        let big = Tensor::zeros(&[4, 1, 9, 9]);
        assert!(conv2d_forward(&x, &big, None, ConvSpec::new(1, 1, 4)).is_err());
        let bias = Tensor::zeros(&[3]);
        assert!(conv2d_forward(&x, &w, Some(&bias), ConvSpec::new(1, 1, 4)).is_err());
        let pw = Tensor::zeros(&[8, 5, 1, 1]);
        let err = conv2d_forward(&x, &pw, None, ConvSpec::pointwise(1)).unwrap_err();
        assert!(alloc::format!("{err}").contains("input channels"));
    }

    #[test]
    fn identity_kernel_on_single_pixel() {
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![5.0]).unwrap();
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let w = Tensor::from_vec(&[1, 1, 3, 3], w).unwrap();
        let y = conv2d_forward(&x, &w, None, ConvSpec::depthwise(1, 3, 1)).unwrap();
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn all_ones_kernel_sums_receptive_field() {
        let x = Tensor::from_vec(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &w, None, ConvSpec::depthwise(1, 3, 1)).unwrap();
        assert_eq!(y.data()[4], 45.0);
        assert_eq!(y.data()[0], 12.0);
    }
}
