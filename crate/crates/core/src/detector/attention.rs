use alloc::vec;
use alloc::vec::Vec;

use super::{DetectorModel, OBJ_CHANNEL};
use crate::error::Result;
use crate::tensor::{Tape, Tensor};

/// Gradient-weighted activation map of the last backbone layer with respect
/// to summed objectness, upsampled to the image and scaled to `[0, 1]`.
/// Returns `[H, W]`; all zeros when nothing contributes positively.
pub fn attention_map(model: &DetectorModel, image: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false);
    // a grad-tracking input makes every activation downstream of it tracked
    let x = tape.leaf(image.clone(), true);
    let pass = model.forward_on(&mut tape, &params, x)?;
    let s = tape.shape(pass.logits).to_vec();
    let (gh, gw, ch) = (s[0], s[1], s[2]);
    let obj_idx: Vec<usize> = (0..gh * gw).map(|i| i * ch + OBJ_CHANNEL).collect();
    let obj = tape.gather(pass.output, &obj_idx)?;
    let score = tape.sum(obj)?;
    tape.backward(score)?;

    let acts = tape.value(pass.features).data().to_vec();
    let grads = tape.grad(pass.features).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; acts.len()]);
    let k = tape.shape(pass.features)[1];
    let plane = gh * gw;
    let mut cam = vec![0.0; plane];
    for c in 0..k {
        let g = &grads[c * plane..(c + 1) * plane];
        let weight = g.iter().sum::<f64>() / plane as f64;
        for (m, a) in cam.iter_mut().zip(&acts[c * plane..(c + 1) * plane]) {
            *m += weight * a;
        }
    }
    cam.iter_mut().for_each(|m| *m = m.max(0.0));

    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut up = upsample(&cam, gh, gw, h, w);
    let peak = up.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        up.iter_mut().for_each(|v| *v /= peak);
    }
    Tensor::new(&[h, w], up)
}

/// Bilinear resize with pixel-centre alignment, clamping at the edges.
fn upsample(src: &[f64], sh: usize, sw: usize, h: usize, w: usize) -> Vec<f64> {
    let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let u = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = libm::floor(u) as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, u - i0 as f64)
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1, fy) = coord(y, h, sh);
        for x in 0..w {
            let (x0, x1, fx) = coord(x, w, sw);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bottom = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}
