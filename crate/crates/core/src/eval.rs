//! Measurement protocols: pseudo-ground-truth AP, per-target confidence,
//! transfer matrices and the TV sweep.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::attack::{patch_scenes, run_attack, training_draw, AttackConfig};
use crate::detector::{Detection, DetectorModel};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::masking::MaskedPatch;
use crate::pipeline::RandomDraw;
use crate::rng;
use crate::scene::{GroundTruth, SceneSample};

pub const DEFAULT_IOU_MATCH: f64 = 0.5;
pub const DEFAULT_TARGET_THRESHOLD: f64 = 0.2;

/// All-point interpolated AP of ranked predictions against per-scene ground
/// truth. Predictions are matched greedily by confidence to the unmatched
/// ground-truth box of highest IoU, if that IoU reaches `iou_match`.
///
/// Predictions with equal confidence form one rank: precision and recall are
/// read only after the whole group, so the result does not depend on scene
/// order.
pub fn average_precision(ground_truth: &[Vec<BBox>], predictions: &[Vec<(BBox, f64)>], iou_match: f64) -> Result<f64> {
    if ground_truth.len() != predictions.len() {
        return Err(Error::Evaluation(format!(
            "{} ground-truth scenes but {} prediction scenes",
            ground_truth.len(),
            predictions.len()
        )));
    }
    let total: usize = ground_truth.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Evaluation("no ground-truth objects".into()));
    }
    let mut ranked: Vec<(usize, BBox, f64)> = predictions
        .iter()
        .enumerate()
        .flat_map(|(s, p)| p.iter().map(move |&(b, c)| (s, b, c)))
        .collect();
    ranked.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(Ordering::Equal));

    let mut matched: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let mut points: Vec<(usize, f64)> = Vec::new(); // (true positives, precision)
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &(scene, bbox, conf)) in ranked.iter().enumerate() {
        let best = ground_truth[scene]
            .iter()
            .enumerate()
            .filter(|&(j, _)| !matched[scene][j])
            .map(|(j, g)| (j, g.iou(&bbox)))
            .filter(|&(_, iou)| iou >= iou_match)
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(b.0.cmp(&a.0)));
        match best {
            Some((j, _)) => {
                matched[scene][j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        let group_end = ranked.get(k + 1).is_none_or(|next| next.2 != conf);
        if group_end {
            points.push((tp, tp as f64 / (tp + fp) as f64));
        }
    }

    // precision envelope, summed over recall steps in whole objects
    let mut area = 0.0;
    let mut envelope = 0.0f64;
    let mut prev_tp = points.last().map_or(0, |p| p.0);
    for &(tp, precision) in points.iter().rev() {
        area += (prev_tp - tp) as f64 * envelope;
        envelope = envelope.max(precision);
        prev_tp = tp;
    }
    area += prev_tp as f64 * envelope;
    let ap = area / total as f64;
    Ok(ap.clamp(0.0, 1.0))
}

fn boxes_with_conf(dets: &[Detection]) -> Vec<(BBox, f64)> {
    dets.iter().map(|d| (d.bbox, d.confidence)).collect()
}

/// Thresholds for turning detector output into detections.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct DetectSettings {
    pub conf_threshold: f64,
    pub iou_threshold: f64,
    pub iou_match: f64,
}

impl Default for DetectSettings {
    fn default() -> Self {
        Self { conf_threshold: 0.4, iou_threshold: 0.45, iou_match: DEFAULT_IOU_MATCH }
    }
}

/// AP of the model against the true synthetic labels.
pub fn labelled_ap(model: &DetectorModel, scenes: &[SceneSample], settings: &DetectSettings) -> Result<f64> {
    let gt: Vec<Vec<BBox>> = scenes.iter().map(|s| s.targets.iter().map(|t| t.bbox).collect()).collect();
    let mut preds = Vec::with_capacity(scenes.len());
    for s in scenes {
        preds.push(boxes_with_conf(&model.detect(&s.image, settings.conf_threshold, settings.iou_threshold)?));
    }
    average_precision(&gt, &preds, settings.iou_match)
}

/// AP on `patched` with the model's own clean detections as ground truth.
pub fn pseudo_gt_ap(
    model: &DetectorModel,
    clean: &[SceneSample],
    patched: &[SceneSample],
    settings: &DetectSettings,
) -> Result<f64> {
    if clean.len() != patched.len() {
        return Err(Error::Evaluation("clean and patched sets differ in length".into()));
    }
    let mut gt = Vec::with_capacity(clean.len());
    let mut preds = Vec::with_capacity(clean.len());
    for (c, p) in clean.iter().zip(patched) {
        let clean_dets = model.detect(&c.image, settings.conf_threshold, settings.iou_threshold)?;
        gt.push(clean_dets.iter().map(|d| d.bbox).collect());
        preds.push(boxes_with_conf(&model.detect(&p.image, settings.conf_threshold, settings.iou_threshold)?));
    }
    average_precision(&gt, &preds, settings.iou_match).map_err(|e| match e {
        Error::Evaluation(_) => Error::Evaluation("no clean detections to use as ground truth".into()),
        other => other,
    })
}

/// Per target: highest confidence among detections at or above `threshold`
/// overlapping it with IoU ≥ 0.5, else 0.
pub fn target_confidences(detections: &[Detection], targets: &[GroundTruth], threshold: f64) -> Vec<f64> {
    targets
        .iter()
        .map(|t| {
            detections
                .iter()
                .filter(|d| d.confidence >= threshold && d.bbox.iou(&t.bbox) >= DEFAULT_IOU_MATCH)
                .map(|d| d.confidence)
                .fold(0.0, f64::max)
        })
        .collect()
}

pub fn per_target_confidence(
    model: &DetectorModel,
    scene: &SceneSample,
    threshold: f64,
    iou_threshold: f64,
) -> Result<Vec<f64>> {
    let dets = model.detect(&scene.image, threshold, iou_threshold)?;
    Ok(target_confidences(&dets, &scene.targets, threshold))
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct EvalReport {
    pub ap: f64,
    pub per_target_confidence: Vec<f64>,
    pub mean_confidence: f64,
    pub config_hash: String,
    pub model_id: String,
    pub patch_id: String,
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Mean per-target confidence of `model` over already patched scenes.
pub fn mean_target_confidence(model: &DetectorModel, patched: &[SceneSample], settings: &DetectSettings) -> Result<(Vec<f64>, f64)> {
    let mut all = Vec::new();
    for s in patched {
        all.extend(per_target_confidence(model, s, DEFAULT_TARGET_THRESHOLD, settings.iou_threshold)?);
    }
    let m = mean(&all);
    Ok((all, m))
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct TransferMatrix {
    /// Model each patch was trained on.
    pub rows: Vec<String>,
    /// Victim models.
    pub cols: Vec<String>,
    /// `cells[i][j]`: mean per-target confidence of patch `i` on model `j`.
    pub cells: Vec<Vec<f64>>,
}

/// Scores every patch against every model. `apply` composites a patch into
/// the suite; it is called once per patch.
pub fn transfer_matrix(
    models: &[(String, DetectorModel)],
    patches: &[(String, MaskedPatch)],
    settings: &DetectSettings,
    mut apply: impl FnMut(&MaskedPatch) -> Result<Vec<SceneSample>>,
) -> Result<TransferMatrix> {
    let mut cells = Vec::with_capacity(patches.len());
    for (_, patch) in patches {
        let patched = apply(patch)?;
        let mut row = Vec::with_capacity(models.len());
        for (_, model) in models {
            row.push(mean_target_confidence(model, &patched, settings)?.1);
        }
        cells.push(row);
    }
    Ok(TransferMatrix {
        rows: patches.iter().map(|p| p.0.clone()).collect(),
        cols: models.iter().map(|m| m.0.clone()).collect(),
        cells,
    })
}

/// Mean target confidence under random physical transforms, once with draws
/// from the attack's own training stream and once with fresh draws.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct EotComparison {
    /// Mean confidence per draw round, training stream.
    pub training: Vec<f64>,
    /// Mean confidence per draw round, fresh stream.
    pub held_out: Vec<f64>,
}

impl EotComparison {
    pub fn training_mean(&self) -> f64 {
        mean(&self.training)
    }

    pub fn held_out_mean(&self) -> f64 {
        mean(&self.held_out)
    }

    /// `|held_out - training| / training`.
    pub fn relative_gap(&self) -> f64 {
        let t = self.training_mean();
        libm::fabs(self.held_out_mean() - t) / t
    }
}

/// Runs `rounds` draw rounds over `scenes`. Round `j` gives target `k` of
/// scene `s` the training draw of epoch `j`, iteration `s`, slot `k`, and an
/// independent draw from `seed` for the held-out side.
pub fn eot_comparison(
    model: &DetectorModel,
    scenes: &[SceneSample],
    patch: &MaskedPatch,
    cfg: &AttackConfig,
    settings: &DetectSettings,
    rounds: usize,
    seed: u64,
) -> Result<EotComparison> {
    if rounds == 0 {
        return Err(Error::Config("eot comparison needs at least one round".into()));
    }
    let side = patch.side();
    let mut out = EotComparison { training: Vec::with_capacity(rounds), held_out: Vec::with_capacity(rounds) };
    for j in 0..rounds {
        let trained = patch_scenes(scenes, patch, cfg, |s, k| training_draw(cfg, side, j, s, k))?;
        out.training.push(mean_target_confidence(model, &trained, settings)?.1);
        let fresh = patch_scenes(scenes, patch, cfg, |s, k| {
            let mut r = rng::stream(seed, &[0xE07, j as u64, s as u64, k as u64]);
            RandomDraw::sample(&cfg.transform, side, &mut r)
        })?;
        out.held_out.push(mean_target_confidence(model, &fresh, settings)?.1);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct AblationRow {
    pub alpha: f64,
    pub final_tv: f64,
    pub mean_confidence: f64,
}

/// Runs the attack once per `alpha` with otherwise identical settings and
/// scores each result with `score`.
pub fn tv_ablation(
    alphas: &[f64],
    cfg: &AttackConfig,
    model: &DetectorModel,
    scenes: &[SceneSample],
    patch: &MaskedPatch,
    mut score: impl FnMut(&MaskedPatch) -> Result<f64>,
) -> Result<Vec<(AblationRow, MaskedPatch)>> {
    if alphas.is_empty() {
        return Err(Error::Config("alpha list is empty".into()));
    }
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let run_cfg = AttackConfig { alpha, ..cfg.clone() };
        let (trained, trace) = run_attack(model, scenes, patch, &run_cfg)?;
        let final_tv = trace.records.last().map_or(0.0, |r| r.l_tv);
        let mean_confidence = score(&trained)?;
        rows.push((AblationRow { alpha, final_tv, mean_confidence }, trained));
    }
    Ok(rows)
}
