//! Loss assembly and the background-only patch optimization loop.

use alloc::format;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::detector::{DetectorModel, GRID_STRIDE, HEAD_FIXED, OBJ_CHANNEL};
use crate::error::{Error, Result};
use crate::masking::MaskedPatch;
use crate::pipeline::{apply_patch, place, place_on_target, pt_transform, Placement, RandomDraw, TransformSpec};
use crate::rng;
use crate::scene::{GroundTruth, SceneSample};
use crate::tensor::{Tape, Tensor, Var};

use rand::seq::SliceRandom;
use rand::Rng as _;

/// Stabilizer inside the TV square root.
pub const TV_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum PlacementMode {
    /// Above the target box at `r_d`, `r_s`.
    Outside,
    /// Centred on the target box at `r_s`.
    OnTarget,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct LrSchedule {
    pub factor: f64,
    pub patience: usize,
    /// Relative improvement needed to reset patience.
    pub threshold: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { factor: 0.5, patience: 10, threshold: 1e-4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Optimizer {
    /// `p -= lr * grad`.
    Gd,
    /// `p -= lr * sign(grad)`.
    SignGd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct AttackConfig {
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub conf_threshold: f64,
    pub iou_threshold: f64,
    pub r_d: f64,
    pub r_s: f64,
    pub placement: PlacementMode,
    pub transform: TransformSpec,
    pub lr_schedule: LrSchedule,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            alpha: 1.5,
            lr: 0.03,
            epochs: 200,
            iters_per_epoch: 10,
            conf_threshold: 0.4,
            iou_threshold: 0.45,
            r_d: 4.0,
            r_s: 1.0,
            placement: PlacementMode::Outside,
            transform: TransformSpec::default(),
            lr_schedule: LrSchedule::default(),
            optimizer: Optimizer::Gd,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha >= 0.0
            && self.lr >= 0.0
            && self.lr.is_finite()
            && self.epochs >= 1
            && self.iters_per_epoch >= 1
            && (0.0..=1.0).contains(&self.conf_threshold)
            && (0.0..=1.0).contains(&self.iou_threshold)
            && self.r_d != 0.0
            && self.r_s > 0.0
            && self.lr_schedule.factor > 0.0
            && self.lr_schedule.factor <= 1.0;
        if !ok {
            return Err(Error::Config(format!("invalid attack config {self:?}")));
        }
        self.transform.validate()
    }

    pub fn placement_for(&self, target: &GroundTruth) -> Placement {
        match self.placement {
            PlacementMode::Outside => place(target, self.r_d, self.r_s),
            PlacementMode::OnTarget => place_on_target(target, self.r_s),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub l_obj: f64,
    pub l_tv: f64,
    pub lr: f64,
    pub mean_objectness: f64,
    pub skipped: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct AttackTrace {
    pub records: Vec<EpochRecord>,
}

/// Mean objectness over cells whose confidence reaches `conf_threshold`;
/// the maximum objectness when none does.
pub fn objectness_loss(tape: &mut Tape, raw: Var, conf_threshold: f64) -> Result<Var> {
    let shape = tape.shape(raw).to_vec();
    if shape.len() != 3 || shape[2] < HEAD_FIXED {
        return Err(Error::Config(format!("raw detector output has shape {shape:?}")));
    }
    let ch = shape[2];
    let cells = shape[0] * shape[1];
    let data = tape.value(raw).data();
    let passing: Vec<usize> = (0..cells)
        .filter(|&c| {
            let cell = &data[c * ch..(c + 1) * ch];
            let best = cell[HEAD_FIXED..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let conf = if ch > HEAD_FIXED { cell[OBJ_CHANNEL] * best } else { cell[OBJ_CHANNEL] };
            conf >= conf_threshold
        })
        .map(|c| c * ch + OBJ_CHANNEL)
        .collect();
    if passing.is_empty() {
        let all: Vec<usize> = (0..cells).map(|c| c * ch + OBJ_CHANNEL).collect();
        let obj = tape.gather(raw, &all)?;
        tape.max(obj)
    } else {
        let obj = tape.gather(raw, &passing)?;
        tape.mean(obj)
    }
}

/// Isotropic total variation summed over channels.
pub fn tv_loss(tape: &mut Tape, patch: Var) -> Result<Var> {
    let shape = tape.shape(patch).to_vec();
    if shape.len() != 3 || shape[1] < 2 || shape[2] < 2 {
        return Err(Error::Config(format!("tv needs [C,H,W] with H,W >= 2, got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let n = c * (h - 1) * (w - 1);
    let (mut here, mut down, mut right) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for k in 0..c {
        for m in 0..h - 1 {
            for j in 0..w - 1 {
                let i = (k * h + m) * w + j;
                here.push(i);
                down.push(i + w);
                right.push(i + 1);
            }
        }
    }
    let p = tape.gather(patch, &here)?;
    let pd = tape.gather(patch, &down)?;
    let pr = tape.gather(patch, &right)?;
    let dv = tape.sub(pd, p)?;
    let dh = tape.sub(pr, p)?;
    let dv2 = tape.mul(dv, dv)?;
    let dh2 = tape.mul(dh, dh)?;
    let sq = tape.add(dv2, dh2)?;
    let sq = tape.add_scalar(sq, TV_EPS);
    let root = tape.sqrt(sq);
    tape.sum(root)
}

pub fn tv_value(patch: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(patch.clone());
    let l = tv_loss(&mut tape, p)?;
    Ok(tape.value(l).item())
}

/// `L_obj + alpha * L_tv`.
pub fn total_loss(tape: &mut Tape, l_obj: Var, l_tv: Var, alpha: f64) -> Result<Var> {
    let weighted = tape.scale(l_tv, alpha);
    tape.add(l_obj, weighted)
}

/// Optimizer state carried between epochs; persisted in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackState {
    pub patch: MaskedPatch,
    /// Next epoch to run.
    pub epoch: usize,
    pub lr: f64,
    pub best_loss: f64,
    pub bad_epochs: usize,
    pub step: u64,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub trace: AttackTrace,
}

impl AttackState {
    pub fn new(patch: MaskedPatch, cfg: &AttackConfig) -> Self {
        Self {
            patch,
            epoch: 0,
            lr: cfg.lr,
            best_loss: f64::INFINITY,
            bad_epochs: 0,
            step: 0,
            adam_m: Vec::new(),
            adam_v: Vec::new(),
            trace: AttackTrace::default(),
        }
    }
}

/// The transform draw for target `k` of iteration `iter` in `epoch`.
pub fn training_draw(cfg: &AttackConfig, side: usize, epoch: usize, iter: usize, k: usize) -> RandomDraw {
    let mut r = rng::stream(cfg.seed, &[0xA77, cfg.transform.rng_seed, epoch as u64, iter as u64, k as u64]);
    RandomDraw::sample(&cfg.transform, side, &mut r)
}

/// Max objectness over grid cells overlapping each target.
fn target_objectness(raw: &Tensor, targets: &[GroundTruth]) -> Vec<f64> {
    let s = raw.shape();
    let (gh, gw, ch) = (s[0], s[1], s[2]);
    let st = GRID_STRIDE as f64;
    targets
        .iter()
        .map(|t| {
            let b = t.bbox;
            let c0 = ((b.x1 / st) as usize).min(gw - 1);
            let c1 = (((b.x2 - 1e-9) / st) as usize).min(gw - 1);
            let r0 = ((b.y1 / st) as usize).min(gh - 1);
            let r1 = (((b.y2 - 1e-9) / st) as usize).min(gh - 1);
            let mut m: f64 = 0.0;
            for r in r0..=r1 {
                for c in c0..=c1 {
                    m = m.max(raw.data()[(r * gw + c) * ch + OBJ_CHANNEL]);
                }
            }
            m
        })
        .collect()
}

/// Loss terms and patch gradient of one scene under fixed transform draws.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub l_obj: f64,
    pub l_tv: f64,
    /// Max objectness near each target.
    pub objectness: Vec<f64>,
    /// `dL/dp_opt`; empty when the loss is not finite.
    pub grad: Vec<f64>,
}

pub fn scene_loss(model: &DetectorModel, scene: &SceneSample, patch: &MaskedPatch, cfg: &AttackConfig, draws: &[RandomDraw]) -> Result<StepOutcome> {
    let params: Vec<Tensor> = model.params.iter().map(|p| p.value.clone()).collect();
    attack_step(model, &params, scene, patch, cfg, draws)
}

fn attack_step(
    model: &DetectorModel,
    params: &[Tensor],
    scene: &SceneSample,
    patch: &MaskedPatch,
    cfg: &AttackConfig,
    draws: &[RandomDraw],
) -> Result<StepOutcome> {
    if draws.len() != scene.targets.len() {
        return Err(Error::Config(format!("{} draws for {} targets", draws.len(), scene.targets.len())));
    }
    let mut tape = Tape::new();
    let bound: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let opt = tape.leaf(patch.optimized.clone(), true);
    let composed = patch.compose_on(&mut tape, opt)?;
    let mut image = tape.constant(scene.image.clone());
    for (target, draw) in scene.targets.iter().zip(draws) {
        let transformed = pt_transform(&mut tape, composed, draw)?;
        image = apply_patch(&mut tape, image, transformed, &cfg.placement_for(target))?.0;
    }
    let pass = model.forward_on(&mut tape, &bound, image)?;
    let l_obj = objectness_loss(&mut tape, pass.output, cfg.conf_threshold)?;
    let l_tv = tv_loss(&mut tape, composed)?;
    let loss = total_loss(&mut tape, l_obj, l_tv, cfg.alpha)?;
    let value = tape.value(loss).item();
    let objectness = target_objectness(tape.value(pass.output), &scene.targets);
    let (l_obj, l_tv) = (tape.value(l_obj).item(), tape.value(l_tv).item());
    if !value.is_finite() {
        return Ok(StepOutcome { loss: value, l_obj, l_tv, objectness, grad: Vec::new() });
    }
    tape.backward(loss)?;
    let grad = tape.grad(opt).expect("patch grad").to_vec();
    Ok(StepOutcome { loss: value, l_obj, l_tv, objectness, grad })
}

/// Runs the optimization from `state` until `cfg.epochs`, calling `on_epoch`
/// after each finished epoch (for checkpointing and logging).
pub fn resume_attack(
    model: &DetectorModel,
    scenes: &[SceneSample],
    mut state: AttackState,
    cfg: &AttackConfig,
    mut on_epoch: impl FnMut(&AttackState) -> Result<()>,
) -> Result<AttackState> {
    cfg.validate()?;
    model.validate()?;
    let usable: Vec<usize> = (0..scenes.len()).filter(|&i| !scenes[i].targets.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Config("no scene with targets to attack".into()));
    }
    let skipped_scenes = scenes.len() - usable.len();
    let side = state.patch.side();
    let params: Vec<Tensor> = model.params.iter().map(|p| p.value.clone()).collect();
    let bg = state.patch.background_mask3();
    let bg_mask: Vec<bool> = bg.data().iter().map(|&m| m == 1.0).collect();
    if let Optimizer::Adam { .. } = cfg.optimizer {
        if state.adam_m.is_empty() {
            state.adam_m = alloc::vec![0.0; bg_mask.len()];
            state.adam_v = alloc::vec![0.0; bg_mask.len()];
        }
    }

    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut order = usable.clone();
        order.shuffle(&mut rng::stream(cfg.seed, &[0x5C3, epoch as u64]));
        let (mut sum_l, mut sum_obj, mut sum_tv, mut objs) = (0.0, 0.0, 0.0, Vec::new());
        for iter in 0..cfg.iters_per_epoch {
            let scene = &scenes[order[iter % order.len()]];
            let draws: Vec<RandomDraw> =
                (0..scene.targets.len()).map(|k| training_draw(cfg, side, epoch, iter, k)).collect();
            let out = attack_step(model, &params, scene, &state.patch, cfg, &draws)?;
            let global = epoch * cfg.iters_per_epoch + iter;
            if !out.loss.is_finite() || out.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Attack { iteration: global, message: format!("non-finite loss {}", out.loss) });
            }
            state.step += 1;
            let data = state.patch.optimized.data_mut();
            for (i, &g) in out.grad.iter().enumerate() {
                if !bg_mask[i] {
                    continue;
                }
                let delta = match cfg.optimizer {
                    Optimizer::Gd => g,
                    Optimizer::SignGd => {
                        if g > 0.0 {
                            1.0
                        } else if g < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }
                    Optimizer::Adam { beta1, beta2, eps } => {
                        let m = &mut state.adam_m[i];
                        let v = &mut state.adam_v[i];
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let t = state.step as i32;
                        let mh = *m / (1.0 - libm::pow(beta1, t as f64));
                        let vh = *v / (1.0 - libm::pow(beta2, t as f64));
                        mh / (libm::sqrt(vh) + eps)
                    }
                };
                data[i] = (data[i] - state.lr * delta).clamp(0.0, 1.0);
            }
            sum_l += out.loss;
            sum_obj += out.l_obj;
            sum_tv += out.l_tv;
            objs.extend(out.objectness);
        }
        let n = cfg.iters_per_epoch as f64;
        let mean_loss = sum_l / n;
        state.trace.records.push(EpochRecord {
            epoch,
            loss: mean_loss,
            l_obj: sum_obj / n,
            l_tv: sum_tv / n,
            lr: state.lr,
            mean_objectness: objs.iter().sum::<f64>() / objs.len().max(1) as f64,
            skipped: skipped_scenes,
        });
        // plateau schedule on the epoch-mean loss
        let sch = cfg.lr_schedule;
        if mean_loss < state.best_loss * (1.0 - sch.threshold) || state.best_loss == f64::INFINITY {
            state.best_loss = mean_loss;
            state.bad_epochs = 0;
        } else {
            state.bad_epochs += 1;
            if state.bad_epochs > sch.patience {
                state.lr *= sch.factor;
                state.bad_epochs = 0;
            }
        }
        state.epoch += 1;
        on_epoch(&state)?;
    }
    Ok(state)
}

/// Optimizes the background of `mp` against `model` on `scenes`.
pub fn run_attack(
    model: &DetectorModel,
    scenes: &[SceneSample],
    mp: &MaskedPatch,
    cfg: &AttackConfig,
) -> Result<(MaskedPatch, AttackTrace)> {
    let state = resume_attack(model, scenes, AttackState::new(mp.clone(), cfg), cfg, |_| Ok(()))?;
    Ok((state.patch, state.trace))
}

/// Same masks as `mp`, background pixels uniform in `[0, 1]`.
pub fn baseline_random_patch(mp: &MaskedPatch, seed: u64) -> Result<MaskedPatch> {
    let mut r = rng::stream(seed, &[0xBA5E]);
    let plane = mp.side() * mp.side();
    let optimized = Tensor::from_fn(mp.original.shape(), |i| {
        let v: f64 = r.gen_range(0.0..1.0);
        if mp.foreground_mask.data()[i % plane] == 1.0 {
            mp.original.data()[i]
        } else {
            v
        }
    });
    MaskedPatch::new(mp.original.clone(), mp.foreground_mask.clone(), optimized)
}

/// A square patch with no fixed foreground, for the on-target baseline.
pub fn full_square_patch(side: usize, seed: u64) -> Result<MaskedPatch> {
    let mut r = rng::stream(seed, &[0xF011]);
    let optimized = Tensor::from_fn(&[3, side, side], |_| r.gen_range(0.3..0.7));
    MaskedPatch::new(Tensor::zeros(&[3, side, side]), Tensor::zeros(&[1, side, side]), optimized)
}

/// Composites the composed patch onto every target of every scene, with the
/// transform draw chosen by `draw(scene_index, target_index)`.
pub fn patch_scenes(
    scenes: &[SceneSample],
    mp: &MaskedPatch,
    cfg: &AttackConfig,
    mut draw: impl FnMut(usize, usize) -> RandomDraw,
) -> Result<Vec<SceneSample>> {
    let composed = mp.composed();
    scenes
        .iter()
        .enumerate()
        .map(|(s, scene)| {
            let mut tape = Tape::new();
            let p = tape.constant(composed.clone());
            let mut image = tape.constant(scene.image.clone());
            for (k, target) in scene.targets.iter().enumerate() {
                let d = draw(s, k);
                let t = pt_transform(&mut tape, p, &d)?;
                image = apply_patch(&mut tape, image, t, &cfg.placement_for(target))?.0;
            }
            Ok(SceneSample { image: tape.value(image).clone(), targets: scene.targets.clone() })
        })
        .collect()
}

/// Digital evaluation: identity transform.
pub fn patch_scenes_plain(scenes: &[SceneSample], mp: &MaskedPatch, cfg: &AttackConfig) -> Result<Vec<SceneSample>> {
    let side = mp.side();
    patch_scenes(scenes, mp, cfg, |_, _| RandomDraw::identity(side))
}
