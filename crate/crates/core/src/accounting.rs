//! Analytic parameter and FLOP counts.
//!
//! Counts are derived from the configuration alone, independently of the
//! parameter registry a built model carries, so the two can be checked
//! against each other.
//!
//! FLOP convention (per single-image forward pass, evaluation mode):
//! a multiply-accumulate is 2 FLOPs and a bias add 1 per output element;
//! batchnorm 2, ReLU 1, sigmoid 4, residual add 1 and channel rescale 1 per
//! element; average pooling 1 per accumulated element; dropout 0.
//! Zero-padded taps are counted.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::blocks::{BacktrackParams, BlockShape, ShortcutParams};
use crate::error::Result;
use crate::kernels::ConvSpec;
use crate::layers::ConvShape;
use crate::network::{Model, ModelConfig};

pub const FLOP_CONVENTION: &str = "1 MAC = 2 FLOPs; bias add 1/elem; batchnorm 2/elem; relu 1/elem; \
sigmoid 4/elem; residual add 1/elem; channel scale 1/elem; avg pool 1/accumulated elem; dropout 0";

pub mod primitives {
    use super::*;

    pub fn conv_params(s: &ConvShape) -> u64 {
        let w = s.out_channels * (s.in_channels / s.spec.groups) * s.kernel * s.kernel;
        (w + if s.bias { s.out_channels } else { 0 }) as u64
    }

    pub fn conv_flops(s: &ConvShape, out_h: usize, out_w: usize) -> u64 {
        let out = (s.out_channels * out_h * out_w) as u64;
        let macs = out * (s.in_channels / s.spec.groups * s.kernel * s.kernel) as u64;
        2 * macs + if s.bias { out } else { 0 }
    }

    pub fn batchnorm_params(channels: usize) -> u64 {
        2 * channels as u64
    }

    pub fn batchnorm_flops(elems: usize) -> u64 {
        2 * elems as u64
    }

    pub fn relu_flops(elems: usize) -> u64 {
        elems as u64
    }

    pub fn sigmoid_flops(elems: usize) -> u64 {
        4 * elems as u64
    }

    pub fn pool_flops(elems: usize) -> u64 {
        elems as u64
    }

    pub fn add_flops(elems: usize) -> u64 {
        elems as u64
    }

    pub fn scale_flops(elems: usize) -> u64 {
        elems as u64
    }
}

use primitives::*;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub path: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub method: String,
    pub input_hw: (usize, usize),
    pub total_params: u64,
    pub total_flops: u64,
    pub rows: Vec<CostRow>,
    pub notes: String,
}

fn out_hw(h: usize, w: usize, kernel: usize, spec: ConvSpec) -> Result<(usize, usize)> {
    crate::kernels::conv::conv_output_hw(h, w, kernel, spec)
}

struct Walker {
    rows: Vec<CostRow>,
}

impl Walker {
    fn row(&mut self, path: String, params: u64, flops: u64) {
        self.rows.push(CostRow { path, params, flops });
    }
}

fn dw_shape(c: usize, k: usize, stride: usize) -> ConvShape {
    ConvShape { in_channels: c, out_channels: c, kernel: k, spec: ConvSpec::depthwise(c, k, stride), bias: false }
}

fn pw_shape(cin: usize, cout: usize, stride: usize, bias: bool) -> ConvShape {
    ConvShape { in_channels: cin, out_channels: cout, kernel: 1, spec: ConvSpec::pointwise(stride), bias }
}

fn block_costs(w: &mut Walker, name: &str, b: &BlockShape, h: usize, wd: usize) -> Result<(usize, usize)> {
    let (cin, cout, k) = (b.in_channels, b.out_channels, b.kernel);
    // extractor
    let dw = dw_shape(cin, k, b.stride);
    let (oh, ow) = out_hw(h, wd, k, dw.spec)?;
    let pw = pw_shape(cin, cout, 1, true);
    let mid = cin * oh * ow;
    let out = cout * oh * ow;
    w.row(
        format!("{name}.extract"),
        conv_params(&dw) + batchnorm_params(cin) + conv_params(&pw) + batchnorm_params(cout),
        conv_flops(&dw, oh, ow) + batchnorm_flops(mid) + relu_flops(mid) + conv_flops(&pw, oh, ow) + batchnorm_flops(out),
    );
    // shared refinement branch, executed `recursion` times
    let rdw = dw_shape(cout, k, 1);
    let rpw = pw_shape(cout, cout, 1, true);
    let per_iter = conv_flops(&rdw, oh, ow)
        + batchnorm_flops(out)
        + relu_flops(out)
        + conv_flops(&rpw, oh, ow)
        + batchnorm_flops(out)
        + add_flops(out);
    w.row(
        format!("{name}.recursive(x{})", b.recursion),
        conv_params(&rdw) + batchnorm_params(cout) + conv_params(&rpw) + batchnorm_params(cout),
        b.recursion as u64 * per_iter,
    );
    // recalibration
    let hidden = BacktrackParams::hidden_width(cout, b.reduction, b.min_excitation_width)?;
    let w1 = pw_shape(cout, hidden, 1, true);
    let w2 = pw_shape(hidden, cout, 1, true);
    w.row(
        format!("{name}.backtrack"),
        conv_params(&w1) + conv_params(&w2),
        pool_flops(out)
            + conv_flops(&w1, 1, 1)
            + relu_flops(hidden)
            + conv_flops(&w2, 1, 1)
            + sigmoid_flops(cout)
            + scale_flops(out),
    );
    if ShortcutParams::needs_projection(cin, cout, b.stride) {
        let proj = pw_shape(cin, cout, b.stride, false);
        let (sh, sw) = out_hw(h, wd, 1, proj.spec)?;
        w.row(
            format!("{name}.shortcut"),
            conv_params(&proj) + batchnorm_params(cout),
            conv_flops(&proj, sh, sw) + batchnorm_flops(cout * sh * sw),
        );
    }
    w.row(format!("{name}.merge"), 0, add_flops(out) + relu_flops(out));
    Ok((oh, ow))
}

/// Full cost breakdown of `cfg` on a single `h × w` image.
pub fn cost_report(cfg: &ModelConfig, input_hw: (usize, usize), method: &str) -> Result<CostReport> {
    cfg.validate()?;
    let mut w = Walker { rows: Vec::new() };
    let (mut h, mut wd) = input_hw;
    let stem = ConvShape {
        in_channels: cfg.input_channels,
        out_channels: cfg.stem_channels,
        kernel: 3,
        spec: ConvSpec::new(1, 1, 1),
        bias: false,
    };
    let (sh, sw) = out_hw(h, wd, 3, stem.spec)?;
    let stem_elems = cfg.stem_channels * sh * sw;
    w.row(
        "stem".into(),
        conv_params(&stem) + batchnorm_params(cfg.stem_channels),
        conv_flops(&stem, sh, sw) + batchnorm_flops(stem_elems) + relu_flops(stem_elems),
    );
    (h, wd) = (sh, sw);
    for (i, b) in cfg.block_shapes().iter().enumerate() {
        (h, wd) = block_costs(&mut w, &format!("blocks.{i}"), b, h, wd)?;
    }
    let c = cfg.final_channels();
    let head = pw_shape(c, cfg.num_classes, 1, true);
    w.row("head".into(), conv_params(&head), pool_flops(c * h * wd) + conv_flops(&head, 1, 1));
    let total_params = w.rows.iter().map(|r| r.params).sum();
    let total_flops = w.rows.iter().map(|r| r.flops).sum();
    Ok(CostReport {
        method: method.into(),
        input_hw,
        total_params,
        total_flops,
        rows: w.rows,
        notes: format!("R={} r={} k={}", cfg.recursion, cfg.reduction, cfg.depthwise_kernel),
    })
}

/// Distinct learnable scalars; shared refinement tensors count once, running statistics not at all.
pub fn count_params(m: &Model) -> Result<u64> {
    Ok(cost_report(&m.config, (m.config.downsample_factor(), m.config.downsample_factor()), "")?.total_params)
}

pub fn count_flops(m: &Model, input_hw: (usize, usize)) -> Result<u64> {
    Ok(cost_report(&m.config, input_hw, "")?.total_flops)
}

/// Human-readable table and its CSV twin.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostTable {
    pub text: String,
    pub csv: String,
}

pub const CSV_HEADER: &str = "method,input_h,input_w,params,flops,notes";

pub fn emit_cost_table(reports: &[CostReport]) -> CostTable {
    let mut text = String::new();
    let _ = writeln!(text, "# FLOPs per image: {FLOP_CONVENTION}");
    let _ = writeln!(
        text,
        "| {:<24} | {:>7} | {:>10} | {:>9} | {:>9} | {:>9} |",
        "Method", "Input", "Params (M)", "FLOPs (G)", "Top-1 (%)", "Top-5 (%)"
    );
    let _ = writeln!(text, "|{:-<26}|{:->9}|{:->12}|{:->11}|{:->11}|{:->11}|", "", "", "", "", "", "");
    let mut csv = String::new();
    let _ = writeln!(csv, "{CSV_HEADER}");
    for r in reports {
        let input = format!("{}x{}", r.input_hw.0, r.input_hw.1);
        let _ = writeln!(
            text,
            "| {:<24} | {:>7} | {:>10.2} | {:>9.3} | {:>9} | {:>9} |",
            r.method,
            input,
            r.total_params as f64 / 1e6,
            r.total_flops as f64 / 1e9,
            "-",
            "-"
        );
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.method, r.input_hw.0, r.input_hw.1, r.total_params, r.total_flops, r.notes
        );
    }
    CostTable { text, csv }
}
