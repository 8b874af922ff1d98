use alloc::vec::Vec;
use core::cmp::Ordering;

use super::{BOX_CHANNELS, HEAD_FIXED, OBJ_CHANNEL};
use crate::geometry::BBox;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub objectness: f64,
    pub class_probs: Vec<f64>,
    /// `objectness * max(class_probs)`.
    pub confidence: f64,
    pub class_id: usize,
    /// Grid cell `(row, col)` that produced the prediction.
    pub cell: (usize, usize),
}

/// Turns sigmoid outputs `[gh, gw, 5 + classes]` into detections: keep cells
/// whose confidence reaches `conf_threshold`, then greedy NMS at
/// `iou_threshold`. Sorted by descending confidence.
pub fn decode(raw: &Tensor, stride: f64, conf_threshold: f64, iou_threshold: f64) -> Vec<Detection> {
    let s = raw.shape();
    let (gh, gw, ch) = (s[0], s[1], s[2]);
    let (img_w, img_h) = (gw as f64 * stride, gh as f64 * stride);
    let d = raw.data();
    let mut candidates = Vec::new();
    for row in 0..gh {
        for col in 0..gw {
            let cell = &d[(row * gw + col) * ch..][..ch];
            let objectness = cell[OBJ_CHANNEL];
            let class_probs = cell[HEAD_FIXED..].to_vec();
            let (class_id, best) = class_probs
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, p)| if p > acc.1 { (i, p) } else { acc });
            let confidence = objectness * best;
            if confidence < conf_threshold {
                continue;
            }
            let b = &cell[..BOX_CHANNELS];
            let cx = (col as f64 + b[0]) * stride;
            let cy = (row as f64 + b[1]) * stride;
            let bbox = BBox::from_center(cx, cy, b[2] * img_w, b[3] * img_h);
            if !bbox.is_valid() {
                continue;
            }
            candidates.push(Detection { bbox, objectness, class_probs, confidence, class_id, cell: (row, col) });
        }
    }
    nms(candidates, iou_threshold)
}

/// Greedy non-maximum suppression. Ties in confidence keep the original order.
pub fn nms(mut detections: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    detections.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap_or(Ordering::Equal));
    let mut kept: Vec<Detection> = Vec::with_capacity(detections.len());
    for det in detections {
        if kept.iter().all(|k| k.bbox.iou(&det.bbox) <= iou_threshold) {
            kept.push(det);
        }
    }
    kept
}
