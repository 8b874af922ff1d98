//! Direct cross-correlation kernels for `[N, C, H, W]` inputs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
}

pub(crate) fn geometry(
    input: &[usize],
    kernel: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    if input.len() != 4 || kernel.len() != 4 {
        return Err(Error::Config(format!(
            "conv2d expects 4-d input and kernel, got {input:?} and {kernel:?}"
        )));
    }
    if input[1] != kernel[1] {
        return Err(Error::Config(format!(
            "conv2d channel mismatch: input {input:?}, kernel {kernel:?}"
        )));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be positive".into()));
    }
    let (h, w, kh, kw) = (input[2], input[3], kernel[2], kernel[3]);
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::Config(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"
        )));
    }
    Ok(ConvGeometry {
        n: input[0],
        c: input[1],
        h,
        w,
        k: kernel[0],
        kh,
        kw,
        oh: (h + 2 * pad - kh) / stride + 1,
        ow: (w + 2 * pad - kw) / stride + 1,
        stride,
        pad,
    })
}

/// Valid output range `[lo, hi)` along one axis for a kernel tap at `offset`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, pad: usize, offset: usize) -> (usize, usize) {
    // input index = o * stride + offset - pad must lie in [0, in_len)
    let lo = if offset >= pad { 0 } else { (pad - offset).div_ceil(stride) };
    let hi = if in_len + pad > offset {
        ((in_len + pad - offset - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub(crate) fn forward(input: &Tensor, kernel: &Tensor, g: &ConvGeometry) -> Tensor {
    let mut out = vec![0.0; g.n * g.k * g.oh * g.ow];
    let x = input.data();
    let wt = kernel.data();
    for n in 0..g.n {
        for k in 0..g.k {
            let out_plane = &mut out[(n * g.k + k) * g.oh * g.ow..][..g.oh * g.ow];
            for c in 0..g.c {
                let in_plane = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = valid_range(g.oh, g.h, g.stride, g.pad, ky);
                    for kx in 0..g.kw {
                        let weight = wt[((k * g.c + c) * g.kh + ky) * g.kw + kx];
                        let (ox_lo, ox_hi) = valid_range(g.ow, g.w, g.stride, g.pad, kx);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let row = &in_plane[iy * g.w..][..g.w];
                            let orow = &mut out_plane[oy * g.ow..][..g.ow];
                            for ox in ox_lo..ox_hi {
                                orow[ox] += weight * row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.n, g.k, g.oh, g.ow], out).expect("conv output shape")
}

/// Gradients with respect to the input and the kernel, each only if requested.
pub(crate) fn backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &[f64],
    g: &ConvGeometry,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let x = input.data();
    let wt = kernel.data();
    let mut gx = want_input.then(|| vec![0.0; x.len()]);
    let mut gw = want_kernel.then(|| vec![0.0; wt.len()]);
    for n in 0..g.n {
        for k in 0..g.k {
            let go_plane = &grad_out[(n * g.k + k) * g.oh * g.ow..][..g.oh * g.ow];
            for c in 0..g.c {
                let base_in = (n * g.c + c) * g.h * g.w;
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = valid_range(g.oh, g.h, g.stride, g.pad, ky);
                    for kx in 0..g.kw {
                        let widx = ((k * g.c + c) * g.kh + ky) * g.kw + kx;
                        let weight = wt[widx];
                        let (ox_lo, ox_hi) = valid_range(g.ow, g.w, g.stride, g.pad, kx);
                        let mut acc_w = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let row_base = base_in + iy * g.w;
                            let gorow = &go_plane[oy * g.ow..][..g.ow];
                            for ox in ox_lo..ox_hi {
                                let ix = row_base + ox * g.stride + kx - g.pad;
                                let go = gorow[ox];
                                if let Some(gx) = gx.as_mut() {
                                    gx[ix] += go * weight;
                                }
                                acc_w += go * x[ix];
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] += acc_w;
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}
