//! 8-bit PNG export for inspection. Nothing written here is read back.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use cba_core::Tensor;

use crate::error::{LabError, LabResult};

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> LabResult<()> {
    let file = File::create(path).map_err(LabError::io(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let fail = |e: png::EncodingError| LabError::Io { path: path.into(), source: std::io::Error::other(e) };
    let mut w = enc.write_header().map_err(fail)?;
    w.write_image_data(rgb).map_err(fail)?;
    w.finish().map_err(fail)
}

/// Writes a `[3, H, W]` image in `[0, 1]`.
pub fn write_image(path: &Path, image: &Tensor) -> LabResult<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(LabError::Format(format!("expected a [3,H,W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = image.data();
    let rgb: Vec<u8> = (0..plane).flat_map(|i| [to_u8(d[i]), to_u8(d[plane + i]), to_u8(d[2 * plane + i])]).collect();
    write_rgb(path, w, h, &rgb)
}

/// Red at 0 through white to blue at 1: low victim confidence (a strong
/// attack) shows red.
pub fn ramp(v: f64) -> [u8; 3] {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    if v < 0.5 {
        let t = v / 0.5;
        [255, to_u8(t), to_u8(t)]
    } else {
        let t = (v - 0.5) / 0.5;
        [to_u8(1.0 - t), to_u8(1.0 - t), 255]
    }
}

/// One `cell` by `cell` block per matrix entry.
pub fn write_heat_map(path: &Path, cells: &[Vec<f64>], cell: usize) -> LabResult<()> {
    let rows = cells.len();
    let cols = cells.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 || cells.iter().any(|r| r.len() != cols) {
        return Err(LabError::Format("heat map needs a nonempty rectangular matrix".into()));
    }
    let (w, h) = (cols * cell, rows * cell);
    let mut rgb = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            rgb.extend_from_slice(&ramp(cells[y / cell][x / cell]));
        }
    }
    write_rgb(path, w, h, &rgb)
}
