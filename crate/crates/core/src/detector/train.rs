use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use super::{cell_index, DetectorModel, GRID_STRIDE, HEAD_FIXED, OBJ_CHANNEL};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::rng;
use crate::scene::{GroundTruth, SceneSample};
use crate::tensor::{Tape, Tensor, Var};

/// SGD with momentum on objectness BCE + box L2 + class BCE.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub box_weight: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    /// Random horizontal and vertical flips.
    pub augment: bool,
    /// The learning rate drops tenfold for the last quarter of the epochs.
    pub step_decay: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 8,
            weight_decay: 5e-4,
            box_weight: 5.0,
            clip_norm: 10.0,
            augment: true,
            step_decay: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

fn flip(sample: &SceneSample, horizontal: bool, vertical: bool) -> SceneSample {
    if !horizontal && !vertical {
        return sample.clone();
    }
    let (h, w) = (sample.height(), sample.width());
    let src = sample.image.data();
    let image = Tensor::from_fn(sample.image.shape(), |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let sy = if vertical { h - 1 - y } else { y };
        let sx = if horizontal { w - 1 - x } else { x };
        src[(c * h + sy) * w + sx]
    });
    let (fw, fh) = (w as f64, h as f64);
    let targets = sample
        .targets
        .iter()
        .map(|t| {
            let b = t.bbox;
            let (x1, x2) = if horizontal { (fw - b.x2, fw - b.x1) } else { (b.x1, b.x2) };
            let (y1, y2) = if vertical { (fh - b.y2, fh - b.y1) } else { (b.y1, b.y2) };
            GroundTruth { bbox: BBox::new(x1, y1, x2, y2), class_id: t.class_id }
        })
        .collect();
    SceneSample { image, targets }
}

/// The cell responsible for each target: the one holding its centre. When
/// two targets share a cell the larger one wins.
pub(crate) fn assign_cells(targets: &[GroundTruth], gh: usize, gw: usize) -> Vec<((usize, usize), GroundTruth)> {
    let mut order: Vec<&GroundTruth> = targets.iter().collect();
    order.sort_by(|a, b| b.bbox.area().partial_cmp(&a.bbox.area()).unwrap_or(core::cmp::Ordering::Equal));
    let mut taken: Vec<((usize, usize), GroundTruth)> = Vec::new();
    for t in order {
        let (cx, cy) = t.bbox.center();
        let col = ((cx / GRID_STRIDE as f64) as usize).min(gw - 1);
        let row = ((cy / GRID_STRIDE as f64) as usize).min(gh - 1);
        if taken.iter().all(|(cell, _)| *cell != (row, col)) {
            taken.push(((row, col), *t));
        }
    }
    taken
}

fn image_loss(
    model: &DetectorModel,
    tape: &mut Tape,
    params: &[Var],
    sample: &SceneSample,
    box_weight: f64,
) -> Result<Var> {
    let x = tape.constant(sample.image.clone());
    let pass = model.forward_on(tape, params, x)?;
    let s = tape.shape(pass.logits).to_vec();
    let (gh, gw, ch) = (s[0], s[1], s[2]);
    let (img_w, img_h) = (sample.width() as f64, sample.height() as f64);
    let stride = GRID_STRIDE as f64;

    let assigned = assign_cells(&sample.targets, gh, gw);
    let mut obj_target = vec![0.0; gh * gw];
    let mut box_idx = Vec::new();
    let mut box_target = Vec::new();
    let mut cls_idx = Vec::new();
    let mut cls_target = Vec::new();
    for &((row, col), t) in &assigned {
        obj_target[row * gw + col] = 1.0;
        let (cx, cy) = t.bbox.center();
        let targets = [cx / stride - col as f64, cy / stride - row as f64, t.bbox.width() / img_w, t.bbox.height() / img_h];
        for (k, v) in targets.into_iter().enumerate() {
            box_idx.push(cell_index(gw, ch, row, col, k));
            box_target.push(v);
        }
        for c in 0..model.num_classes {
            cls_idx.push(cell_index(gw, ch, row, col, HEAD_FIXED + c));
            cls_target.push(if c == t.class_id { 1.0 } else { 0.0 });
        }
    }
    let obj_idx: Vec<usize> = (0..gh * gw).map(|i| i * ch + OBJ_CHANNEL).collect();
    let obj_logits = tape.gather(pass.logits, &obj_idx)?;
    let obj_bce = tape.bce_with_logits(obj_logits, &obj_target)?;
    let mut loss = tape.sum(obj_bce)?;
    if !assigned.is_empty() {
        let pred = tape.gather(pass.output, &box_idx)?;
        let target = tape.constant(Tensor::new(&[box_target.len()], box_target)?);
        let diff = tape.sub(pred, target)?;
        let sq = tape.mul(diff, diff)?;
        let box_sum = tape.sum(sq)?;
        let box_term = tape.scale(box_sum, box_weight);
        loss = tape.add(loss, box_term)?;
        let cls_logits = tape.gather(pass.logits, &cls_idx)?;
        let cls_bce = tape.bce_with_logits(cls_logits, &cls_target)?;
        let cls_sum = tape.sum(cls_bce)?;
        loss = tape.add(loss, cls_sum)?;
    }
    Ok(loss)
}

/// Trains `model` on `dataset`. Deterministic in `cfg.seed`.
pub fn train_detector(
    model: &DetectorModel,
    dataset: &[SceneSample],
    cfg: &TrainConfig,
) -> Result<(DetectorModel, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Config("detector training needs a nonempty dataset".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("invalid training config {cfg:?}")));
    }
    for (i, s) in dataset.iter().enumerate() {
        let (w, h) = (s.width() as f64, s.height() as f64);
        if s.targets.iter().any(|t| !t.bbox.is_valid() || !t.bbox.inside(w, h)) {
            return Err(Error::Config(format!("scene {i} has a box outside the image")));
        }
    }
    model.validate()?;

    let mut model = model.clone();
    let mut velocity: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
    let mut report = TrainReport::default();
    let decay_from = cfg.epochs - cfg.epochs / 4;

    for epoch in 0..cfg.epochs {
        let lr = if cfg.step_decay && epoch >= decay_from { cfg.lr * 0.1 } else { cfg.lr };
        let mut rng = rng::stream(cfg.seed, &[0x7EA1, epoch as u64]);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let params = model.bind(&mut tape, true);
            let mut total: Option<Var> = None;
            for &i in batch {
                let (hf, vf) = if cfg.augment { (rng.gen_bool(0.5), rng.gen_bool(0.5)) } else { (false, false) };
                let sample = flip(&dataset[i], hf, vf);
                let l = image_loss(&model, &mut tape, &params, &sample, cfg.box_weight)?;
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l)?,
                });
            }
            let total = total.expect("nonempty batch");
            let loss = tape.scale(total, 1.0 / batch.len() as f64);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Training { epoch, message: format!("non-finite loss {value}") });
            }
            tape.backward(loss)?;
            let grads: Vec<&[f64]> = params.iter().map(|&p| tape.grad(p).expect("param grad")).collect();
            let norm = libm::sqrt(grads.iter().flat_map(|g| g.iter()).map(|g| g * g).sum::<f64>());
            if !norm.is_finite() {
                return Err(Error::Training { epoch, message: "non-finite gradient".into() });
            }
            let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
            for ((p, v), g) in model.params.iter_mut().zip(&mut velocity).zip(&grads) {
                for ((w, vel), &gi) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                    *vel = cfg.momentum * *vel + gi * clip + cfg.weight_decay * *w;
                    *w -= lr * *vel;
                }
            }
            epoch_loss += value;
            batches += 1;
        }
        report.epoch_losses.push(epoch_loss / batches as f64);
        if !model.all_finite() {
            return Err(Error::Training { epoch, message: "parameters became non-finite".into() });
        }
    }
    Ok((model, report))
}
