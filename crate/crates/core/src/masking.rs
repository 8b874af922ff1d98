//! Foreground/background split of the original patch and composition of the
//! adversarial aircraft: `p_aa = p0 * M_ac + p_opt * M_bg`.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

/// Default luminance threshold separating the aircraft from the black backdrop.
pub const DEFAULT_SALIENCY_THRESHOLD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedPatch {
    /// `p0`, `[3, S, S]`.
    pub original: Tensor,
    /// `M_ac`, `[1, S, S]`, binary.
    pub foreground_mask: Tensor,
    /// `M_bg = 1 - M_ac`.
    pub background_mask: Tensor,
    /// `p_opt`, `[3, S, S]`; only its background pixels matter.
    pub optimized: Tensor,
}

impl MaskedPatch {
    /// Assembles a patch from its parts, checking every invariant.
    pub fn new(original: Tensor, foreground_mask: Tensor, optimized: Tensor) -> Result<Self> {
        let s = original.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != s[2] {
            return Err(Error::Config(format!("original patch must be [3,S,S], got {s:?}")));
        }
        let side = s[1];
        if foreground_mask.shape() != [1, side, side] || optimized.shape() != s {
            return Err(Error::Config(format!(
                "mask {:?} / optimized {:?} do not match original {s:?}",
                foreground_mask.shape(),
                optimized.shape()
            )));
        }
        if foreground_mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Config("foreground mask must be strictly binary".into()));
        }
        let in_unit = |t: &Tensor| t.data().iter().all(|v| (0.0..=1.0).contains(v));
        if !in_unit(&original) || !in_unit(&optimized) {
            return Err(Error::Config("patch pixels must lie in [0, 1]".into()));
        }
        let background_mask = foreground_mask.map(|m| 1.0 - m);
        Ok(Self { original, foreground_mask, background_mask, optimized })
    }

    /// Builds masks from `p0` and seeds the optimizable background with
    /// uniform values in `[0.3, 0.7]`.
    pub fn from_original(original: Tensor, threshold: f64, seed: u64) -> Result<Self> {
        let fg = binarize(&extract_saliency(&original)?, threshold)?;
        let optimized = init_optimized(&original, &fg, seed);
        Self::new(original, fg, optimized)
    }

    pub fn side(&self) -> usize {
        self.original.shape()[1]
    }

    /// Number of optimizable pixels.
    pub fn background_pixels(&self) -> usize {
        self.background_mask.data().iter().filter(|&&m| m == 1.0).count()
    }

    pub fn background_fraction(&self) -> f64 {
        self.background_pixels() as f64 / (self.side() * self.side()) as f64
    }

    /// Foreground mask repeated over the three colour channels.
    pub fn foreground_mask3(&self) -> Tensor {
        repeat_channels(&self.foreground_mask)
    }

    pub fn background_mask3(&self) -> Tensor {
        repeat_channels(&self.background_mask)
    }

    /// `p_aa` as a plain value.
    pub fn composed(&self) -> Tensor {
        let bg = self.background_mask3();
        let fg = self.foreground_mask3();
        Tensor::from_fn(self.original.shape(), |i| {
            self.original.data()[i] * fg.data()[i] + self.optimized.data()[i] * bg.data()[i]
        })
    }

    /// Records `p_aa` on `tape`, with `optimized` standing for `p_opt`.
    /// The foreground term is a constant, so gradients reach `optimized`
    /// only through background pixels.
    pub fn compose_on(&self, tape: &mut Tape, optimized: Var) -> Result<Var> {
        let fixed = self.original.zip_map(&self.foreground_mask3(), |p, m| p * m)?;
        let fixed = tape.constant(fixed);
        let bg = tape.constant(self.background_mask3());
        let free = tape.mul(optimized, bg)?;
        tape.add(fixed, free)
    }
}

fn repeat_channels(mask: &Tensor) -> Tensor {
    let plane = mask.numel();
    let side = mask.shape()[1];
    Tensor::from_fn(&[3, side, side], |i| mask.data()[i % plane])
}

fn init_optimized(original: &Tensor, fg: &Tensor, seed: u64) -> Tensor {
    let mut rng = rng::stream(seed, &[0x1417]);
    let plane = fg.numel();
    Tensor::from_fn(original.shape(), |i| {
        let v: f64 = rng.gen_range(0.3..0.7);
        if fg.data()[i % plane] == 1.0 {
            original.data()[i]
        } else {
            v
        }
    })
}

/// Per-pixel saliency as the brightest channel; valid for a near-black backdrop.
pub fn extract_saliency(patch: &Tensor) -> Result<Tensor> {
    let s = patch.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Config(format!("saliency expects [3,H,W], got {s:?}")));
    }
    let plane = s[1] * s[2];
    let d = patch.data();
    Tensor::new(
        &[1, s[1], s[2]],
        (0..plane).map(|i| d[i].max(d[plane + i]).max(d[2 * plane + i])).collect(),
    )
}

/// Thresholds a saliency map, keeps the largest 4-connected component and
/// fills its holes.
pub fn binarize(saliency: &Tensor, threshold: f64) -> Result<Tensor> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} outside (0, 1)")));
    }
    let s = saliency.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::Config(format!("binarize expects [1,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let on: Vec<bool> = saliency.data().iter().map(|&v| v >= threshold).collect();

    let mut label = vec![usize::MAX; h * w];
    let mut best: Option<(usize, usize)> = None; // (label, size)
    let mut next = 0;
    for start in 0..h * w {
        if !on[start] || label[start] != usize::MAX {
            continue;
        }
        let size = flood(&mut label, start, next, w, h, |i| on[i]);
        if best.is_none_or(|(_, b)| size > b) {
            best = Some((next, size));
        }
        next += 1;
    }
    let Some((keep, _)) = best else {
        return Err(Error::Masking("no foreground pixels above threshold".into()));
    };
    let component: Vec<bool> = label.iter().map(|&l| l == keep).collect();

    // background reachable from the border is outside; everything else is filled
    let mut outside = vec![usize::MAX; h * w];
    for i in 0..h * w {
        let (x, y) = (i % w, i / w);
        let border = x == 0 || y == 0 || x == w - 1 || y == h - 1;
        if border && !component[i] && outside[i] == usize::MAX {
            flood(&mut outside, i, 0, w, h, |j| !component[j]);
        }
    }
    Tensor::new(&[1, h, w], outside.iter().map(|&o| if o == 0 { 0.0 } else { 1.0 }).collect())
}

/// Labels the 4-connected region of `start` satisfying `member`; returns its size.
fn flood(
    label: &mut [usize],
    start: usize,
    id: usize,
    w: usize,
    h: usize,
    member: impl Fn(usize) -> bool,
) -> usize {
    let mut queue = VecDeque::from([start]);
    label[start] = id;
    let mut size = 0;
    while let Some(i) = queue.pop_front() {
        size += 1;
        let (x, y) = (i % w, i / w);
        let mut visit = |j: usize| {
            if label[j] == usize::MAX && member(j) {
                label[j] = id;
                queue.push_back(j);
            }
        };
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < w {
            visit(i + 1);
        }
        if y > 0 {
            visit(i - w);
        }
        if y + 1 < h {
            visit(i + w);
        }
    }
    size
}
