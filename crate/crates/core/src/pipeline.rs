//! Patch transformation (lighting, rotation, scale, noise) and placement of
//! the transformed patch into a scene.
//!
//! Everything here records onto a [`Tape`] so the composite image stays
//! differentiable with respect to the patch pixels.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::rng::Rng;
use crate::scene::GroundTruth;
use crate::tensor::{Tape, Tensor, Var};

/// Ranges for the random physical-dynamics augmentation.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct TransformSpec {
    /// Half-width of the additive uniform noise.
    pub noise_amp: f64,
    /// Rotation drawn uniformly from `[-rot_range_deg, rot_range_deg]`.
    pub rot_range_deg: f64,
    /// Scale drawn uniformly from `[1 - scale_jitter, 1 + scale_jitter]`.
    pub scale_jitter: f64,
    pub brightness_range: (f64, f64),
    pub contrast_range: (f64, f64),
    pub rng_seed: u64,
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self {
            noise_amp: 0.05,
            rot_range_deg: 20.0,
            scale_jitter: 0.10,
            brightness_range: (0.8, 1.2),
            contrast_range: (0.9, 1.1),
            rng_seed: 0,
        }
    }
}

impl TransformSpec {
    /// A spec whose every draw is the identity transform.
    pub fn identity() -> Self {
        Self {
            noise_amp: 0.0,
            rot_range_deg: 0.0,
            scale_jitter: 0.0,
            brightness_range: (1.0, 1.0),
            contrast_range: (1.0, 1.0),
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: (f64, f64)| r.0 <= r.1 && r.0.is_finite() && r.1.is_finite();
        if !(self.noise_amp >= 0.0
            && self.rot_range_deg >= 0.0
            && (0.0..1.0).contains(&self.scale_jitter)
            && ordered(self.brightness_range)
            && ordered(self.contrast_range))
        {
            return Err(Error::Config(format!("invalid transform spec {self:?}")));
        }
        Ok(())
    }
}

/// One concrete sample of the transform parameters, replayable.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomDraw {
    pub brightness: f64,
    pub angle_rad: f64,
    pub scale: f64,
    /// Additive noise field, `[3, S, S]` flattened.
    pub noise: Vec<f64>,
    pub contrast: f64,
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

impl RandomDraw {
    pub fn identity(side: usize) -> Self {
        Self { brightness: 1.0, angle_rad: 0.0, scale: 1.0, noise: vec![0.0; 3 * side * side], contrast: 1.0 }
    }

    pub fn sample(spec: &TransformSpec, side: usize, rng: &mut Rng) -> Self {
        let brightness = uniform(rng, spec.brightness_range.0, spec.brightness_range.1);
        let rot = spec.rot_range_deg.to_radians();
        let angle_rad = uniform(rng, -rot, rot);
        let scale = uniform(rng, 1.0 - spec.scale_jitter, 1.0 + spec.scale_jitter);
        let noise = (0..3 * side * side).map(|_| uniform(rng, -spec.noise_amp, spec.noise_amp)).collect();
        let contrast = uniform(rng, spec.contrast_range.0, spec.contrast_range.1);
        Self { brightness, angle_rad, scale, noise, contrast }
    }
}

/// Applies brightness, rotation + scale, additive noise, contrast and a final
/// clamp to `[0, 1]`, in that order.
pub fn pt_transform(tape: &mut Tape, patch: Var, draw: &RandomDraw) -> Result<Var> {
    let shape = tape.shape(patch).to_vec();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(Error::Config(format!("patch must be [C,S,S], got {shape:?}")));
    }
    let side = shape[1];
    if draw.noise.len() != shape.iter().product::<usize>() {
        return Err(Error::Config("noise field does not match the patch".into()));
    }
    let lit = tape.scale(patch, draw.brightness);

    // output pixel d (relative to the centre) reads the input at R(-angle) d / scale
    let c = (side as f64 - 1.0) / 2.0;
    let (sin, cos) = (libm::sin(draw.angle_rad), libm::cos(draw.angle_rad));
    let mut coords = Vec::with_capacity(side * side * 2);
    for i in 0..side {
        for j in 0..side {
            let (dx, dy) = (j as f64 - c, i as f64 - c);
            coords.push((cos * dx + sin * dy) / draw.scale + c);
            coords.push((-sin * dx + cos * dy) / draw.scale + c);
        }
    }
    let warped = tape.sample_pixels(lit, coords, side, side)?;
    let noise = tape.constant(Tensor::new(&shape, draw.noise.clone())?);
    let noisy = tape.add(warped, noise)?;
    let centred = tape.add_scalar(noisy, -0.5);
    let contrasted = tape.scale(centred, draw.contrast);
    let shifted = tape.add_scalar(contrasted, 0.5);
    Ok(tape.clamp(shifted, 0.0, 1.0))
}

/// Where and how large a square patch lands in the scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub center: (f64, f64),
    pub side: f64,
    pub r_d: f64,
    pub r_s: f64,
}

/// Patch above the target: centre `((x1+x2)/2, (y1+y2)/2 - (y2-y1)/r_d)`,
/// side `sqrt(r_s * w_t * h_t)`.
pub fn place(target: &GroundTruth, r_d: f64, r_s: f64) -> Placement {
    let b = &target.bbox;
    let (w_t, h_t) = (b.x2 - b.x1, b.y2 - b.y1);
    Placement {
        center: ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0 - (b.y2 - b.y1) / r_d),
        side: libm::sqrt(r_s * w_t * h_t),
        r_d,
        r_s,
    }
}

/// Patch centred on the target box.
pub fn place_on_target(target: &GroundTruth, r_s: f64) -> Placement {
    let b = &target.bbox;
    let (cx, cy) = b.center();
    Placement { center: (cx, cy), side: libm::sqrt(r_s * b.width() * b.height()), r_d: f64::INFINITY, r_s }
}

/// Integer pixel footprint `[x0, x0 + side) x [y0, y0 + side)` of a placement,
/// before clipping.
pub fn footprint(p: &Placement) -> (i64, i64, usize) {
    let side = (libm::round(p.side) as i64).max(1);
    let x0 = libm::floor(p.center.0 - side as f64 / 2.0 + 0.5) as i64;
    let y0 = libm::floor(p.center.1 - side as f64 / 2.0 + 0.5) as i64;
    (x0, y0, side as usize)
}

impl Placement {
    pub fn footprint_box(&self) -> BBox {
        let (x0, y0, s) = footprint(self);
        BBox::new(x0 as f64, y0 as f64, (x0 + s as i64) as f64, (y0 + s as i64) as f64)
    }
}

/// Resizes `patch` onto the placement footprint and composites it:
/// `x* = (1 - M) * x + M * P`. Returns `x*` and the clipped mask `M` as
/// `[1, H, W]`.
pub fn apply_patch(tape: &mut Tape, scene: Var, patch: Var, placement: &Placement) -> Result<(Var, Tensor)> {
    let ss = tape.shape(scene).to_vec();
    let ps = tape.shape(patch).to_vec();
    if ss.len() != 3 || ps.len() != 3 || ss[0] != ps[0] || ps[1] != ps[2] {
        return Err(Error::Config(format!("cannot apply patch {ps:?} to scene {ss:?}")));
    }
    if !(placement.side > 0.0 && placement.center.0.is_finite() && placement.center.1.is_finite()) {
        return Err(Error::Placement(format!("degenerate placement {placement:?}")));
    }
    let (h, w, s) = (ss[1], ss[2], ps[1]);
    let (x0, y0, side) = footprint(placement);
    let cx0 = x0.max(0);
    let cy0 = y0.max(0);
    let cx1 = (x0 + side as i64).min(w as i64);
    let cy1 = (y0 + side as i64).min(h as i64);
    if cx0 >= cx1 || cy0 >= cy1 {
        return Err(Error::Placement(format!("patch footprint misses the {w}x{h} image: {placement:?}")));
    }
    let ratio = s as f64 / side as f64;
    let mut coords = vec![f64::NAN; h * w * 2];
    let mut mask = vec![0.0; h * w];
    for y in cy0..cy1 {
        for x in cx0..cx1 {
            let i = y as usize * w + x as usize;
            coords[2 * i] = ((x - x0) as f64 + 0.5) * ratio - 0.5;
            coords[2 * i + 1] = ((y - y0) as f64 + 0.5) * ratio - 0.5;
            mask[i] = 1.0;
        }
    }
    let sampled = tape.sample_pixels(patch, coords, h, w)?;
    let plane = h * w;
    let keep = tape.constant(Tensor::from_fn(&ss, |i| 1.0 - mask[i % plane]));
    let put = tape.constant(Tensor::from_fn(&ss, |i| mask[i % plane]));
    let kept = tape.mul(scene, keep)?;
    let placed = tape.mul(sampled, put)?;
    let out = tape.add(kept, placed)?;
    Ok((out, Tensor::new(&[1, h, w], mask)?))
}

/// On-target baseline: the patch is centred on the target box.
pub fn apply_on_target(
    tape: &mut Tape,
    scene: Var,
    patch: Var,
    target: &GroundTruth,
    r_s: f64,
) -> Result<(Var, Tensor)> {
    apply_patch(tape, scene, patch, &place_on_target(target, r_s))
}

/// Value-level composite of a fixed patch, without gradient tracking.
pub fn composite(scene: &Tensor, patch: &Tensor, placement: &Placement) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let s = tape.constant(scene.clone());
    let p = tape.constant(patch.clone());
    let (out, mask) = apply_patch(&mut tape, s, p, placement)?;
    Ok((tape.value(out).clone(), mask))
}
