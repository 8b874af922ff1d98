//! Bilinear sampling with a zero border.
//!
//! Coordinates are pixel positions where integer values land on pixel
//! centres. The normalized `[-1, 1]` convention of [`identity_grid`] follows
//! the usual align-corners-false mapping.

use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;

/// Maps a normalized coordinate in `[-1, 1]` to a pixel coordinate on an
/// axis of `extent` pixels.
#[inline]
pub fn normalized_to_pixel(coord: f64, extent: usize) -> f64 {
    ((coord + 1.0) * extent as f64 - 1.0) * 0.5
}

/// A `[h, w, 2]` grid of normalized `(x, y)` pairs that samples every pixel
/// centre of an `h x w` image.
pub fn identity_grid(h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            data.push((2 * j + 1) as f64 / w as f64 - 1.0);
            data.push((2 * i + 1) as f64 / h as f64 - 1.0);
        }
    }
    Tensor::new(&[h, w, 2], data).expect("grid shape")
}

#[derive(Clone, Copy)]
struct Taps {
    idx: [usize; 4],
    weight: [f64; 4],
    valid: [bool; 4],
}

#[inline]
fn taps(u: f64, v: f64, h: usize, w: usize) -> Taps {
    let x0f = libm::floor(u);
    let y0f = libm::floor(v);
    let fx = u - x0f;
    let fy = v - y0f;
    let x0 = x0f as i64;
    let y0 = y0f as i64;
    let mut t = Taps { idx: [0; 4], weight: [0.0; 4], valid: [false; 4] };
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ];
    for (n, &(x, y, wt)) in corners.iter().enumerate() {
        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && wt != 0.0 {
            t.idx[n] = y as usize * w + x as usize;
            t.weight[n] = wt;
            t.valid[n] = true;
        }
    }
    t
}

/// Samples `input: [C, H, W]` at `out_h * out_w` pixel coordinates stored as
/// interleaved `(x, y)` pairs.
pub(crate) fn forward(input: &Tensor, coords: &[f64], out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let plane = out_h * out_w;
    let mut out = vec![0.0; c * plane];
    let x = input.data();
    for p in 0..plane {
        if !coords[2 * p].is_finite() || !coords[2 * p + 1].is_finite() {
            continue;
        }
        let t = taps(coords[2 * p], coords[2 * p + 1], h, w);
        for ch in 0..c {
            let src = &x[ch * h * w..][..h * w];
            let mut acc = 0.0;
            for n in 0..4 {
                if t.valid[n] {
                    acc += t.weight[n] * src[t.idx[n]];
                }
            }
            out[ch * plane + p] = acc;
        }
    }
    Tensor::new(&[c, out_h, out_w], out).expect("sample output shape")
}

pub(crate) fn backward(input_shape: &[usize], coords: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let plane = coords.len() / 2;
    let mut gx = vec![0.0; c * h * w];
    for p in 0..plane {
        if !coords[2 * p].is_finite() || !coords[2 * p + 1].is_finite() {
            continue;
        }
        let t = taps(coords[2 * p], coords[2 * p + 1], h, w);
        for ch in 0..c {
            let go = grad_out[ch * plane + p];
            if go == 0.0 {
                continue;
            }
            let dst = &mut gx[ch * h * w..][..h * w];
            for n in 0..4 {
                if t.valid[n] {
                    dst[t.idx[n]] += t.weight[n] * go;
                }
            }
        }
    }
    gx
}
