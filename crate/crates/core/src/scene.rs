//! Procedural aerial scenes: low-frequency textured ground with aircraft
//! silhouettes drawn on top, plus the black-backdrop aircraft photo used as
//! the original patch.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng as _;
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

const SCENE_STREAM: u64 = 0x5CE7E;
const PATCH_STREAM: u64 = 0x9A7C4;
const SUPERSAMPLE: usize = 4;

/// Parameters of the scene generator.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub min_aircraft: usize,
    pub max_aircraft: usize,
    /// Aircraft length range in pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Free space kept above each aircraft for a patch placed with these
    /// distance and size coefficients.
    pub reserve_r_d: f64,
    pub reserve_r_s: f64,
    /// Gap between the footprints of neighbouring aircraft.
    pub margin: f64,
    /// Unlabelled rectangular clutter objects.
    pub distractors: usize,
    pub max_retries: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 96,
            height: 96,
            min_aircraft: 1,
            max_aircraft: 2,
            min_size: 18.0,
            max_size: 30.0,
            reserve_r_d: 4.0,
            reserve_r_s: 1.0,
            margin: 3.0,
            distractors: 2,
            max_retries: 400,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("invalid scene spec: {m}")));
        if !(96..=256).contains(&self.width) || !(96..=256).contains(&self.height) {
            return bad("canvas sides must be within 96..=256");
        }
        if self.min_aircraft < 1 || self.max_aircraft > 4 || self.min_aircraft > self.max_aircraft {
            return bad("aircraft count must satisfy 1 <= min <= max <= 4");
        }
        if !(self.min_size >= 16.0 && self.max_size <= 48.0 && self.min_size <= self.max_size) {
            return bad("aircraft sizes must satisfy 16 <= min <= max <= 48");
        }
        if !(self.reserve_r_d > 0.0 && self.reserve_r_s > 0.0 && self.margin >= 0.0) {
            return bad("reserve coefficients must be positive and margin non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub targets: Vec<GroundTruth>,
}

impl SceneSample {
    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }
}

/// Silhouette proportions relative to the aircraft length.
#[derive(Clone, Copy, Debug)]
struct Airframe {
    length: f64,
    span: f64,
    fuselage: f64,
    root_chord: f64,
    tip_chord: f64,
    wing_y: f64,
    sweep: f64,
    tail_span: f64,
    tail_chord: f64,
}

impl Airframe {
    fn sample(rng: &mut Rng, length: f64) -> Self {
        Self {
            length,
            span: rng.gen_range(0.8..1.05),
            fuselage: rng.gen_range(0.11..0.16),
            root_chord: rng.gen_range(0.24..0.34),
            tip_chord: rng.gen_range(0.07..0.12),
            wing_y: rng.gen_range(-0.14..-0.02),
            sweep: rng.gen_range(0.12..0.3),
            tail_span: rng.gen_range(0.32..0.45),
            tail_chord: rng.gen_range(0.1..0.15),
        }
    }

    /// A stubby, broad-winged model that fills a square frame well.
    fn sample_model(rng: &mut Rng, length: f64) -> Self {
        Self {
            length,
            span: rng.gen_range(1.0..1.08),
            fuselage: rng.gen_range(0.2..0.24),
            root_chord: rng.gen_range(0.5..0.56),
            tip_chord: rng.gen_range(0.18..0.22),
            wing_y: rng.gen_range(-0.22..-0.18),
            sweep: rng.gen_range(0.16..0.22),
            tail_span: rng.gen_range(0.5..0.58),
            tail_chord: rng.gen_range(0.18..0.22),
        }
    }

    /// Convex pieces in local coordinates, nose pointing to negative y.
    fn polygons(&self) -> Vec<Vec<(f64, f64)>> {
        let l = self.length;
        let half = l / 2.0;
        let fw = self.fuselage * l / 2.0;
        let fuselage = vec![
            (0.0, -half),
            (fw, -half + 0.14 * l),
            (fw, half - 0.06 * l),
            (fw * 0.4, half),
            (-fw * 0.4, half),
            (-fw, half - 0.06 * l),
            (-fw, -half + 0.14 * l),
        ];
        let mut out = vec![fuselage];
        let wy = self.wing_y * l;
        let ws = self.span * l / 2.0;
        let ty = half - self.tail_chord * l - 0.02 * l;
        let ts = self.tail_span * l / 2.0;
        for side in [-1.0, 1.0] {
            out.push(vec![
                (0.0, wy),
                (side * ws, wy + self.sweep * l),
                (side * ws, wy + (self.sweep + self.tip_chord) * l),
                (0.0, wy + self.root_chord * l),
            ]);
            out.push(vec![
                (0.0, ty),
                (side * ts, ty + 0.5 * self.tail_chord * l),
                (side * ts, ty + 0.9 * self.tail_chord * l),
                (0.0, ty + self.tail_chord * l),
            ]);
        }
        out
    }
}

fn inside_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// An airframe posed at a centre and heading.
struct Pose {
    polys: Vec<Vec<(f64, f64)>>,
    cx: f64,
    cy: f64,
    cos: f64,
    sin: f64,
}

impl Pose {
    fn new(frame: &Airframe, cx: f64, cy: f64, heading: f64) -> Self {
        Self { polys: frame.polygons(), cx, cy, cos: libm::cos(heading), sin: libm::sin(heading) }
    }

    /// Bounding box of the rotated vertices.
    fn extent(&self) -> BBox {
        let mut b = BBox::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(x, y) in self.polys.iter().flatten() {
            let wx = self.cx + self.cos * x - self.sin * y;
            let wy = self.cy + self.sin * x + self.cos * y;
            b = BBox::new(b.x1.min(wx), b.y1.min(wy), b.x2.max(wx), b.y2.max(wy));
        }
        b
    }

    fn contains(&self, wx: f64, wy: f64) -> bool {
        let dx = wx - self.cx;
        let dy = wy - self.cy;
        let x = self.cos * dx + self.sin * dy;
        let y = -self.sin * dx + self.cos * dy;
        self.polys.iter().any(|p| inside_polygon(p, x, y))
    }

    /// Per-pixel coverage fraction on a `w x h` canvas.
    fn rasterize(&self, w: usize, h: usize) -> Vec<f64> {
        let mut cov = vec![0.0; w * h];
        let e = self.extent();
        let x0 = libm::floor(e.x1).max(0.0) as usize;
        let y0 = libm::floor(e.y1).max(0.0) as usize;
        let x1 = (libm::ceil(e.x2).max(0.0) as usize).min(w);
        let y1 = (libm::ceil(e.y2).max(0.0) as usize).min(h);
        let step = 1.0 / SUPERSAMPLE as f64;
        for py in y0..y1 {
            for px in x0..x1 {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let wx = px as f64 + (sx as f64 + 0.5) * step;
                        let wy = py as f64 + (sy as f64 + 0.5) * step;
                        if self.contains(wx, wy) {
                            hits += 1;
                        }
                    }
                }
                cov[py * w + px] = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            }
        }
        cov
    }
}

/// Tight box around the pixels with at least half coverage.
fn silhouette_box(cov: &[f64], w: usize) -> Option<BBox> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for (i, &c) in cov.iter().enumerate() {
        if c >= 0.5 {
            let (x, y) = (i % w, i / w);
            b = Some(match b {
                None => (x, y, x, y),
                Some((a, bb, c2, d)) => (a.min(x), bb.min(y), c2.max(x), d.max(y)),
            });
        }
    }
    b.map(|(x1, y1, x2, y2)| BBox::new(x1 as f64, y1 as f64, (x2 + 1) as f64, (y2 + 1) as f64))
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smoothly interpolated value noise in `[-1, 1]`.
fn value_noise(rng: &mut Rng, w: usize, h: usize, cells: usize) -> Vec<f64> {
    let g = cells + 1;
    let lattice: Vec<f64> = (0..g * g).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let fy = y as f64 / h as f64 * cells as f64;
        let iy = (libm::floor(fy) as usize).min(cells - 1);
        let ty = smoothstep(fy - iy as f64);
        for x in 0..w {
            let fx = x as f64 / w as f64 * cells as f64;
            let ix = (libm::floor(fx) as usize).min(cells - 1);
            let tx = smoothstep(fx - ix as f64);
            let a = lattice[iy * g + ix];
            let b = lattice[iy * g + ix + 1];
            let c = lattice[(iy + 1) * g + ix];
            let d = lattice[(iy + 1) * g + ix + 1];
            let top = a + (b - a) * tx;
            let bottom = c + (d - c) * tx;
            out[y * w + x] = top + (bottom - top) * ty;
        }
    }
    out
}

const GROUND_PALETTE: [[f64; 3]; 4] = [
    [0.34, 0.34, 0.36], // tarmac
    [0.27, 0.33, 0.22], // grass
    [0.42, 0.38, 0.30], // sand
    [0.30, 0.30, 0.27], // concrete
];

fn ground(rng: &mut Rng, w: usize, h: usize) -> Vec<f64> {
    let base = GROUND_PALETTE[rng.gen_range(0..GROUND_PALETTE.len())];
    let coarse_cells = rng.gen_range(3..6);
    let coarse = value_noise(rng, w, h, coarse_cells);
    let fine_cells = rng.gen_range(8..14);
    let fine = value_noise(rng, w, h, fine_cells);
    let amp = rng.gen_range(0.06..0.12);
    let mut img = vec![0.0; 3 * w * h];
    for ch in 0..3 {
        let tint = rng.gen_range(-0.03..0.03);
        for i in 0..w * h {
            let grain = rng.gen_range(-0.015..0.015);
            img[ch * w * h + i] =
                (base[ch] + tint + amp * coarse[i] + 0.4 * amp * fine[i] + grain).clamp(0.0, 1.0);
        }
    }
    img
}

fn blend(img: &mut [f64], cov: &[f64], color: [f64; 3]) {
    let plane = cov.len();
    for (i, &c) in cov.iter().enumerate() {
        if c > 0.0 {
            for ch in 0..3 {
                let p = &mut img[ch * plane + i];
                *p = *p * (1.0 - c) + color[ch] * c;
            }
        }
    }
}

fn aircraft_color(rng: &mut Rng) -> [f64; 3] {
    let g = rng.gen_range(0.72..0.95);
    [0, 1, 2].map(|_| (g + rng.gen_range(-0.05f64..0.05)).clamp(0.0, 1.0))
}

/// Square patch footprint of the attack placement, used to reserve space.
fn reserved_patch(b: &BBox, r_d: f64, r_s: f64) -> BBox {
    let (cx, cy) = b.center();
    let side = libm::sqrt(r_s * b.width() * b.height()) + 2.0;
    BBox::from_center(cx, cy - b.height() / r_d, side, side)
}

/// Deterministically renders a scene from `seed`.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<SceneSample> {
    Ok(generate_scene_detailed(seed, spec)?.0)
}

/// As [`generate_scene`], also returning each target's silhouette
/// (pixels with at least half coverage), row-major over the canvas.
pub fn generate_scene_detailed(seed: u64, spec: &SceneSpec) -> Result<(SceneSample, Vec<Vec<bool>>)> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = rng::stream(seed, &[SCENE_STREAM]);
    let mut img = ground(&mut rng, w, h);

    for _ in 0..spec.distractors {
        let dw = rng.gen_range(5.0..14.0);
        let dh = rng.gen_range(5.0..14.0);
        let x = rng.gen_range(0.0..w as f64 - dw);
        let y = rng.gen_range(0.0..h as f64 - dh);
        let shade = rng.gen_range(0.1..0.85);
        let color = [0, 1, 2].map(|_| (shade + rng.gen_range(-0.08f64..0.08)).clamp(0.0, 1.0));
        let cov: Vec<f64> = (0..w * h)
            .map(|i| {
                let (px, py) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
                if px >= x && px < x + dw && py >= y && py < y + dh {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        blend(&mut img, &cov, color);
    }

    let count = rng.gen_range(spec.min_aircraft..=spec.max_aircraft);
    let mut footprints: Vec<BBox> = Vec::with_capacity(count);
    let mut targets = Vec::with_capacity(count);
    let mut silhouettes = Vec::with_capacity(count);
    for n in 0..count {
        let mut placed = false;
        for _ in 0..spec.max_retries {
            let length = rng.gen_range(spec.min_size..=spec.max_size);
            let frame = Airframe::sample(&mut rng, length);
            let heading = rng.gen_range(0.0..2.0 * PI);
            let local = Pose::new(&frame, 0.0, 0.0, heading).extent().expand(1.0);
            let reserve = reserved_patch(&local, spec.reserve_r_d, spec.reserve_r_s);
            let foot = local.union(&reserve).expand(spec.margin);
            let (lo_x, hi_x) = (-foot.x1, w as f64 - foot.x2);
            let (lo_y, hi_y) = (-foot.y1, h as f64 - foot.y2);
            if lo_x >= hi_x || lo_y >= hi_y {
                continue;
            }
            let cx = rng.gen_range(lo_x..hi_x);
            let cy = rng.gen_range(lo_y..hi_y);
            let moved = BBox::new(foot.x1 + cx, foot.y1 + cy, foot.x2 + cx, foot.y2 + cy);
            if footprints.iter().any(|f| f.intersection(&moved) > 0.0) {
                continue;
            }
            let pose = Pose::new(&frame, cx, cy, heading);
            let cov = pose.rasterize(w, h);
            let Some(bbox) = silhouette_box(&cov, w) else { continue };
            blend(&mut img, &cov, aircraft_color(&mut rng));
            footprints.push(moved);
            targets.push(GroundTruth { bbox, class_id: 0 });
            silhouettes.push(cov.iter().map(|&c| c >= 0.5).collect());
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place aircraft {} of {count} after {} attempts (seed {seed})",
                n + 1,
                spec.max_retries
            )));
        }
    }
    Ok((SceneSample { image: Tensor::new(&[3, h, w], img)?, targets }, silhouettes))
}

/// The original patch together with the generator's own silhouette mask.
#[derive(Clone, Debug)]
pub struct OriginalPatch {
    pub image: Tensor,
    /// `true` where the aircraft covers at least half a pixel.
    pub silhouette: Vec<bool>,
}

/// A centred aircraft model photographed on a near-black backdrop.
pub fn render_original_patch(seed: u64, side: usize) -> Result<Tensor> {
    Ok(render_original_patch_detailed(seed, side)?.image)
}

pub fn render_original_patch_detailed(seed: u64, side: usize) -> Result<OriginalPatch> {
    if side < 32 {
        return Err(Error::Config(format!("original patch side {side} is below 32")));
    }
    let mut rng = rng::stream(seed, &[PATCH_STREAM]);
    let proto = Airframe::sample_model(&mut rng, 1.0);
    let heading = rng.gen_range(-0.12..0.12);
    let c = side as f64 / 2.0;
    let fraction = |len: f64| {
        let frame = Airframe { length: len, ..proto };
        let cov = Pose::new(&frame, c, c, heading).rasterize(side, side);
        let n = cov.iter().filter(|&&v| v >= 0.5).count();
        (n as f64 / (side * side) as f64, cov)
    };
    // area grows monotonically with length; bisect towards half coverage
    let (mut lo, mut hi) = (0.3 * side as f64, 2.5 * side as f64);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if fraction(mid).0 < 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // studio capture: crisp silhouette edges, no blending with the backdrop
    let (_, cov) = fraction(0.5 * (lo + hi));
    let cov: Vec<f64> = cov.iter().map(|&c| if c >= 0.5 { 1.0 } else { 0.0 }).collect();
    let color = aircraft_color(&mut rng);
    let plane = side * side;
    let mut img = vec![0.0; 3 * plane];
    for v in img.iter_mut() {
        *v = rng.gen_range(0.0..0.03);
    }
    blend(&mut img, &cov, color);
    Ok(OriginalPatch {
        image: Tensor::new(&[3, side, side], img)?,
        silhouette: cov.iter().map(|&v| v >= 0.5).collect(),
    })
}
