//! 2-D convolution kernels (cross-correlation semantics).
//!
//! Both paths accumulate per-input-channel partial sums in (fy, fx) order,
//! so the fast 3x3/stride-1/pad-1 kernel is bit-identical to the general
//! one and to the channel-partial nested-loop oracle used in tests.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub ci: usize,
    pub co: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) fn conv_dims(
    x_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    if x_shape.len() != 4 || w_shape.len() != 4 {
        return Err(Error::Dimension(format!(
            "conv2d expects 4-D input and weight, got {:?} and {:?}",
            x_shape, w_shape
        )));
    }
    let (n, ci, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (co, wci, fh, fw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    if wci != ci {
        return Err(Error::Dimension(format!(
            "conv2d: input has {ci} channels but kernel expects {wci}"
        )));
    }
    if fh != fw {
        return Err(Error::Dimension(format!(
            "conv2d: kernel must be square, got {fh}x{fw}"
        )));
    }
    if stride < 1 {
        return Err(Error::Config("conv2d: stride must be >= 1".into()));
    }
    let f = fh;
    if f == 0 || f > h + 2 * pad || f > w + 2 * pad {
        return Err(Error::Dimension(format!(
            "conv2d: kernel {f}x{f} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let ho = (h + 2 * pad - f) / stride + 1;
    let wo = (w + 2 * pad - f) / stride + 1;
    Ok(ConvDims {
        n,
        ci,
        co,
        h,
        w,
        f,
        stride,
        pad,
        ho,
        wo,
    })
}

fn is_fast_path(d: &ConvDims) -> bool {
    d.f == 3 && d.stride == 1 && d.pad == 1 && d.w >= 2 && d.h >= 1
}

pub(crate) fn forward(x: &[f64], wt: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.n * d.co * d.ho * d.wo];
    if is_fast_path(d) {
        fast3x3_accumulate(x, wt, &mut out, d.n, d.ci, d.co, d.h, d.w);
    } else {
        general_forward(x, wt, &mut out, d);
    }
    out
}

fn general_forward(x: &[f64], wt: &[f64], out: &mut [f64], d: &ConvDims) {
    let xplane = d.h * d.w;
    let oplane = d.ho * d.wo;
    for nn in 0..d.n {
        let xb = &x[nn * d.ci * xplane..(nn + 1) * d.ci * xplane];
        let ob = &mut out[nn * d.co * oplane..(nn + 1) * d.co * oplane];
        for o in 0..d.co {
            for oy in 0..d.ho {
                for ox in 0..d.wo {
                    let mut acc = 0.0;
                    for c in 0..d.ci {
                        let xp = &xb[c * xplane..(c + 1) * xplane];
                        let wk = &wt[((o * d.ci + c) * d.f) * d.f..((o * d.ci + c) * d.f + d.f) * d.f];
                        let mut cacc = 0.0;
                        for fy in 0..d.f {
                            let iy = oy * d.stride + fy;
                            if iy < d.pad || iy >= d.h + d.pad {
                                continue;
                            }
                            let iy = iy - d.pad;
                            for fx in 0..d.f {
                                let ix = ox * d.stride + fx;
                                if ix < d.pad || ix >= d.w + d.pad {
                                    continue;
                                }
                                cacc += wk[fy * d.f + fx] * xp[iy * d.w + ix - d.pad];
                            }
                        }
                        acc += cacc;
                    }
                    ob[o * oplane + oy * d.wo + ox] = acc;
                }
            }
        }
    }
}

/// 3x3, stride 1, pad 1: one pass per output row covering all nine taps,
/// interior columns vectorizable, edge columns handled separately. Term
/// order within a channel matches the general kernel.
#[allow(clippy::too_many_arguments)]
fn fast3x3_accumulate(
    x: &[f64],
    wt: &[f64],
    out: &mut [f64],
    n: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
) {
    let plane = h * w;
    for nn in 0..n {
        let xb = &x[nn * ci * plane..(nn + 1) * ci * plane];
        let ob = &mut out[nn * co * plane..(nn + 1) * co * plane];
        for o in 0..co {
            let op_ = &mut ob[o * plane..(o + 1) * plane];
            for c in 0..ci {
                let xp = &xb[c * plane..(c + 1) * plane];
                let wk = &wt[(o * ci + c) * 9..(o * ci + c) * 9 + 9];
                let (k00, k01, k02) = (wk[0], wk[1], wk[2]);
                let (k10, k11, k12) = (wk[3], wk[4], wk[5]);
                let (k20, k21, k22) = (wk[6], wk[7], wk[8]);
                for y in 0..h {
                    let r0 = if y >= 1 { &xp[(y - 1) * w..y * w] } else { &[][..] };
                    let r1 = &xp[y * w..(y + 1) * w];
                    let r2 = if y + 1 < h {
                        &xp[(y + 1) * w..(y + 2) * w]
                    } else {
                        &[][..]
                    };
                    let orow = &mut op_[y * w..(y + 1) * w];
                    match (r0.is_empty(), r2.is_empty()) {
                        (false, false) => {
                            for ox in 1..w - 1 {
                                orow[ox] += k00 * r0[ox - 1]
                                    + k01 * r0[ox]
                                    + k02 * r0[ox + 1]
                                    + k10 * r1[ox - 1]
                                    + k11 * r1[ox]
                                    + k12 * r1[ox + 1]
                                    + k20 * r2[ox - 1]
                                    + k21 * r2[ox]
                                    + k22 * r2[ox + 1];
                            }
                            orow[0] += k01 * r0[0]
                                + k02 * r0[1]
                                + k11 * r1[0]
                                + k12 * r1[1]
                                + k21 * r2[0]
                                + k22 * r2[1];
                            orow[w - 1] += k00 * r0[w - 2]
                                + k01 * r0[w - 1]
                                + k10 * r1[w - 2]
                                + k11 * r1[w - 1]
                                + k20 * r2[w - 2]
                                + k21 * r2[w - 1];
                        }
                        (true, false) => {
                            for ox in 1..w - 1 {
                                orow[ox] += k10 * r1[ox - 1]
                                    + k11 * r1[ox]
                                    + k12 * r1[ox + 1]
                                    + k20 * r2[ox - 1]
                                    + k21 * r2[ox]
                                    + k22 * r2[ox + 1];
                            }
                            orow[0] += k11 * r1[0] + k12 * r1[1] + k21 * r2[0] + k22 * r2[1];
                            orow[w - 1] +=
                                k10 * r1[w - 2] + k11 * r1[w - 1] + k20 * r2[w - 2] + k21 * r2[w - 1];
                        }
                        (false, true) => {
                            for ox in 1..w - 1 {
                                orow[ox] += k00 * r0[ox - 1]
                                    + k01 * r0[ox]
                                    + k02 * r0[ox + 1]
                                    + k10 * r1[ox - 1]
                                    + k11 * r1[ox]
                                    + k12 * r1[ox + 1];
                            }
                            orow[0] += k01 * r0[0] + k02 * r0[1] + k11 * r1[0] + k12 * r1[1];
                            orow[w - 1] +=
                                k00 * r0[w - 2] + k01 * r0[w - 1] + k10 * r1[w - 2] + k11 * r1[w - 1];
                        }
                        (true, true) => {
                            for ox in 1..w - 1 {
                                orow[ox] += k10 * r1[ox - 1] + k11 * r1[ox] + k12 * r1[ox + 1];
                            }
                            orow[0] += k11 * r1[0] + k12 * r1[1];
                            orow[w - 1] += k10 * r1[w - 2] + k11 * r1[w - 1];
                        }
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. the input. For the fast path this is a 3x3 convolution
/// of the output gradient with the channel-transposed, spatially flipped
/// kernel; the general path scatters.
pub(crate) fn backward_input(wt: &[f64], gout: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut dx = vec![0.0; d.n * d.ci * d.h * d.w];
    if is_fast_path(d) {
        let mut wflip = vec![0.0; d.ci * d.co * 9];
        for o in 0..d.co {
            for c in 0..d.ci {
                for fy in 0..3 {
                    for fx in 0..3 {
                        wflip[(c * d.co + o) * 9 + fy * 3 + fx] =
                            wt[(o * d.ci + c) * 9 + (2 - fy) * 3 + (2 - fx)];
                    }
                }
            }
        }
        fast3x3_accumulate(gout, &wflip, &mut dx, d.n, d.co, d.ci, d.h, d.w);
    } else {
        let xplane = d.h * d.w;
        let oplane = d.ho * d.wo;
        for nn in 0..d.n {
            for o in 0..d.co {
                for oy in 0..d.ho {
                    for ox in 0..d.wo {
                        let g = gout[(nn * d.co + o) * oplane + oy * d.wo + ox];
                        if g == 0.0 {
                            continue;
                        }
                        for c in 0..d.ci {
                            for fy in 0..d.f {
                                let iy = oy * d.stride + fy;
                                if iy < d.pad || iy >= d.h + d.pad {
                                    continue;
                                }
                                let iy = iy - d.pad;
                                for fx in 0..d.f {
                                    let ix = ox * d.stride + fx;
                                    if ix < d.pad || ix >= d.w + d.pad {
                                        continue;
                                    }
                                    dx[(nn * d.ci + c) * xplane + iy * d.w + ix - d.pad] +=
                                        g * wt[((o * d.ci + c) * d.f + fy) * d.f + fx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient w.r.t. the kernel: per-tap row dot products between the output
/// gradient and the shifted input.
pub(crate) fn backward_weight(x: &[f64], gout: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut dw = vec![0.0; d.co * d.ci * d.f * d.f];
    let xplane = d.h * d.w;
    let oplane = d.ho * d.wo;
    if is_fast_path(d) {
        for nn in 0..d.n {
            for o in 0..d.co {
                let gp = &gout[(nn * d.co + o) * oplane..(nn * d.co + o + 1) * oplane];
                for c in 0..d.ci {
                    let xp = &x[(nn * d.ci + c) * xplane..(nn * d.ci + c + 1) * xplane];
                    let dwk = &mut dw[(o * d.ci + c) * 9..(o * d.ci + c) * 9 + 9];
                    for fy in 0..3usize {
                        for fx in 0..3usize {
                            // output rows y where input row y+fy-1 is valid
                            let ylo = if fy == 0 { 1 } else { 0 };
                            let yhi = if fy == 2 { d.h - 1 } else { d.h };
                            let xlo = if fx == 0 { 1 } else { 0 };
                            let xhi = if fx == 2 { d.w - 1 } else { d.w };
                            let mut acc = 0.0;
                            for y in ylo..yhi {
                                let yi = y + fy - 1;
                                let grow = &gp[y * d.w + xlo..y * d.w + xhi];
                                let xrow = &xp[yi * d.w + xlo + fx - 1..yi * d.w + xhi + fx - 1];
                                let mut s = 0.0;
                                for (a, b) in grow.iter().zip(xrow) {
                                    s += a * b;
                                }
                                acc += s;
                            }
                            dwk[fy * 3 + fx] += acc;
                        }
                    }
                }
            }
        }
    } else {
        for nn in 0..d.n {
            for o in 0..d.co {
                for oy in 0..d.ho {
                    for ox in 0..d.wo {
                        let g = gout[(nn * d.co + o) * oplane + oy * d.wo + ox];
                        if g == 0.0 {
                            continue;
                        }
                        for c in 0..d.ci {
                            for fy in 0..d.f {
                                let iy = oy * d.stride + fy;
                                if iy < d.pad || iy >= d.h + d.pad {
                                    continue;
                                }
                                let iy = iy - d.pad;
                                for fx in 0..d.f {
                                    let ix = ox * d.stride + fx;
                                    if ix < d.pad || ix >= d.w + d.pad {
                                        continue;
                                    }
                                    dw[((o * d.ci + c) * d.f + fy) * d.f + fx] +=
                                        g * x[(nn * d.ci + c) * xplane + iy * d.w + ix - d.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dw
}
