//! The five subcommands. Each reads the newest finished run of the stages it
//! depends on and writes a new numbered run of its own.

use std::path::{Path, PathBuf};

use cba_core::attack::{
    baseline_random_patch, full_square_patch, patch_scenes_plain, resume_attack, AttackConfig, AttackState, AttackTrace,
    PlacementMode,
};
use cba_core::detector::{train_detector, DetectorModel, TrainConfig};
use cba_core::eval::{
    eot_comparison, labelled_ap, mean, mean_target_confidence, pseudo_gt_ap, transfer_matrix, tv_ablation,
};
use cba_core::masking::MaskedPatch;
use cba_core::{generate_scene, render_original_patch, SceneSample};

use crate::codec::{CheckpointDoc, ModelDoc, PatchDoc, PatchParts};
use crate::config::RunConfig;
use crate::error::{LabError, LabResult};
use crate::images;
use crate::store::{
    check_hash, finish_run, latest_run, new_run_dir, read_json, split_seeds, write_json, write_text, IndexedScene,
    SceneIndex, Stage,
};

/// A checkpoint is written after every this many attack epochs.
pub const CHECKPOINT_EVERY: usize = 10;

#[derive(Clone, Debug, Default)]
pub struct Options {
    pub out: PathBuf,
    /// Accept inputs stamped with a different config hash.
    pub allow_hash_mismatch: bool,
    /// Continue an interrupted `attack` run in this directory.
    pub resume: Option<PathBuf>,
}

struct Context<'a> {
    cfg: &'a RunConfig,
    hash: String,
    opts: &'a Options,
}

impl<'a> Context<'a> {
    fn new(cfg: &'a RunConfig, opts: &'a Options) -> LabResult<Self> {
        cfg.validate()?;
        Ok(Self { cfg, hash: cfg.hash(), opts })
    }

    fn check(&self, what: &str, found: &str) -> LabResult<()> {
        check_hash(what, found, &self.hash, self.opts.allow_hash_mismatch)
    }

    fn scene_index(&self) -> LabResult<SceneIndex> {
        let dir = latest_run(&self.opts.out, Stage::Scenes)?;
        let index: SceneIndex = read_json(&dir.join("index.json"))?;
        self.check(&format!("scene set {}", dir.display()), &index.config_hash)?;
        Ok(index)
    }

    /// Models of the newest `models` run, in config order.
    fn models(&self) -> LabResult<Vec<(String, DetectorModel)>> {
        let dir = latest_run(&self.opts.out, Stage::Models)?;
        let mut out = Vec::new();
        for v in &self.cfg.detector.variants {
            let path = dir.join(format!("{}.json", v.name()));
            if !path.is_file() {
                return Err(LabError::Missing(format!("model file {}", path.display())));
            }
            let doc: ModelDoc = read_json(&path)?;
            self.check(&format!("model {}", doc.model_id), &doc.config_hash)?;
            out.push((doc.model_id.clone(), doc.to_model()?));
        }
        Ok(out)
    }

    fn attack_cfg(&self) -> AttackConfig {
        AttackConfig { seed: self.cfg.seeded(self.cfg.attack.seed), ..self.cfg.attack.clone() }
    }

    fn original_patch(&self) -> LabResult<MaskedPatch> {
        let p = &self.cfg.patch;
        let p0 = render_original_patch(self.cfg.seeded(p.original_seed), p.side)?;
        Ok(MaskedPatch::from_original(p0, p.saliency_threshold, self.cfg.seeded(p.init_seed))?)
    }
}

/// Writes every split as PNGs plus `index.json`.
pub fn gen_scenes(cfg: &RunConfig, opts: &Options) -> LabResult<PathBuf> {
    let ctx = Context::new(cfg, opts)?;
    let dir = new_run_dir(&opts.out, Stage::Scenes)?;
    let mut splits = Vec::new();
    for (name, split) in cfg.splits() {
        let sub = dir.join(name);
        std::fs::create_dir_all(&sub).map_err(LabError::io(&sub))?;
        let mut entries = Vec::new();
        for (i, seed) in split_seeds(cfg, split).into_iter().enumerate() {
            let scene = generate_scene(seed, &cfg.scenes.spec)?;
            let file = format!("{name}/{i:05}.png");
            images::write_image(&dir.join(&file), &scene.image)?;
            entries.push(IndexedScene {
                seed,
                file,
                boxes: scene.targets.iter().map(|t| t.bbox).collect(),
                classes: scene.targets.iter().map(|t| t.class_id).collect(),
            });
        }
        log::info!("{name}: {} scenes", entries.len());
        splits.push((name.to_string(), entries));
    }
    let index = SceneIndex { config_hash: ctx.hash.clone(), spec: cfg.scenes.spec.clone(), splits };
    write_json(&dir.join("index.json"), &index)?;
    finish_run(&dir, Stage::Scenes, &ctx.hash)?;
    println!("scenes written to {}", dir.display());
    Ok(dir)
}

/// Trains one detector per configured variant and reports its held-out AP.
pub fn train_detectors(cfg: &RunConfig, opts: &Options) -> LabResult<PathBuf> {
    let ctx = Context::new(cfg, opts)?;
    let index = ctx.scene_index()?;
    let train = index.load_split("train")?;
    let held_out = index.load_split("held_out")?;
    let dir = new_run_dir(&opts.out, Stage::Models)?;
    let tc = TrainConfig { seed: cfg.seeded(cfg.detector.training.seed), ..cfg.detector.training.clone() };
    let mut summary = csv::Writer::from_writer(Vec::new());
    summary.write_record(["model_id", "variant", "parameters", "final_loss", "held_out_ap"]).expect("in memory");
    for &variant in &cfg.detector.variants {
        let init = DetectorModel::new(variant, cfg.detector.num_classes, cfg.seeded(cfg.detector.init_seed));
        log::info!("training {} ({} parameters)", variant.name(), init.parameter_count());
        let (model, report) = train_detector(&init, &train, &tc).map_err(LabError::Training)?;
        let ap = labelled_ap(&model, &held_out, &cfg.eval.detect)?;
        let id = variant.name();
        println!("model {id}: held-out AP {ap}");
        let final_loss = report.epoch_losses.last().copied().unwrap_or(f64::NAN);
        summary
            .write_record([id.to_string(), id.to_string(), model.parameter_count().to_string(), final_loss.to_string(), ap.to_string()])
            .expect("in memory");
        write_json(&dir.join(format!("{id}.json")), &ModelDoc::new(id, &ctx.hash, &model, ap, report.epoch_losses))?;
    }
    write_csv(&dir.join("summary.csv"), summary)?;
    finish_run(&dir, Stage::Models, &ctx.hash)?;
    Ok(dir)
}

fn write_csv(path: &Path, w: csv::Writer<Vec<u8>>) -> LabResult<()> {
    let bytes = w.into_inner().map_err(|e| LabError::Format(e.to_string()))?;
    std::fs::write(path, bytes).map_err(LabError::io(path))
}

pub fn trace_csv(trace: &AttackTrace) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "L", "L_obj", "L_tv", "lr", "mean_objectness"]).expect("in memory");
    for r in &trace.records {
        w.write_record([
            r.epoch.to_string(),
            r.loss.to_string(),
            r.l_obj.to_string(),
            r.l_tv.to_string(),
            r.lr.to_string(),
            r.mean_objectness.to_string(),
        ])
        .expect("in memory");
    }
    String::from_utf8(w.into_inner().expect("in memory")).expect("ascii")
}

fn write_patch(dir: &Path, doc: &PatchDoc, patch: &MaskedPatch) -> LabResult<()> {
    images::write_image(&dir.join(format!("{}.png", doc.patch_id)), &patch.composed())?;
    write_json(&dir.join(format!("{}.json", doc.patch_id)), doc)
}

/// One patch to optimize: where it starts, how it is placed, whom it attacks.
struct Job {
    patch_id: String,
    model_idx: usize,
    init: MaskedPatch,
    cfg: AttackConfig,
}

fn latest_checkpoint(dir: &Path, patch_id: &str) -> LabResult<Option<PathBuf>> {
    let ck = dir.join("checkpoints");
    if !ck.is_dir() {
        return Ok(None);
    }
    let prefix = format!("{patch_id}-e");
    let mut found: Vec<(usize, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(&ck).map_err(LabError::io(&ck))? {
        let path = entry.map_err(LabError::io(&ck))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if let Some(epoch) = name.strip_prefix(&prefix).and_then(|r| r.strip_suffix(".json")).and_then(|e| e.parse().ok()) {
            found.push((epoch, path));
        }
    }
    Ok(found.into_iter().max().map(|(_, p)| p))
}

/// Optimizes a CBA patch against every model, plus the baselines, with a
/// checkpoint every few epochs. With `opts.resume` set, finished patches in
/// that directory are kept and unfinished ones continue from their newest
/// checkpoint.
pub fn attack(cfg: &RunConfig, opts: &Options) -> LabResult<PathBuf> {
    let ctx = Context::new(cfg, opts)?;
    let index = ctx.scene_index()?;
    let models = ctx.models()?;
    let scenes = index.load_split("attack")?;
    let dir = match &opts.resume {
        Some(d) if d.is_dir() => d.clone(),
        Some(d) => return Err(LabError::Missing(format!("attack run {} to resume", d.display()))),
        None => new_run_dir(&opts.out, Stage::Attacks)?,
    };
    std::fs::create_dir_all(dir.join("checkpoints")).map_err(LabError::io(dir.join("checkpoints")))?;

    let base = ctx.original_patch()?;
    let acfg = ctx.attack_cfg();
    let mut jobs = Vec::new();
    for (i, (id, _)) in models.iter().enumerate() {
        jobs.push(Job { patch_id: format!("cba-{id}"), model_idx: i, init: base.clone(), cfg: acfg.clone() });
        if cfg.patch.on_target_baseline {
            let on = AttackConfig { placement: PlacementMode::OnTarget, r_s: acfg.r_s * base.background_fraction(), ..acfg.clone() };
            let init = full_square_patch(cfg.patch.side, cfg.seeded(cfg.patch.init_seed))?;
            jobs.push(Job { patch_id: format!("on-target-{id}"), model_idx: i, init, cfg: on });
        }
    }

    let random = baseline_random_patch(&base, cfg.seeded(cfg.patch.random_baseline_seed))?;
    let random_doc = PatchDoc {
        patch_id: "random".into(),
        config_hash: ctx.hash.clone(),
        model_id: String::new(),
        placement: acfg.placement,
        r_s: acfg.r_s,
        r_d: acfg.r_d,
        seed: cfg.seeded(cfg.patch.random_baseline_seed),
        parts: PatchParts::from_patch(&random),
    };
    write_patch(&dir, &random_doc, &random)?;

    for job in jobs {
        let final_path = dir.join(format!("{}.json", job.patch_id));
        if final_path.is_file() {
            let doc: PatchDoc = read_json(&final_path)?;
            ctx.check(&format!("patch {}", doc.patch_id), &doc.config_hash)?;
            log::info!("{} already finished", job.patch_id);
            continue;
        }
        let (model_id, model) = &models[job.model_idx];
        let state = match latest_checkpoint(&dir, &job.patch_id)? {
            Some(path) => {
                let doc: CheckpointDoc = read_json(&path)?;
                ctx.check(&format!("checkpoint {}", path.display()), &doc.config_hash)?;
                log::info!("{}: resuming at epoch {}", job.patch_id, doc.epoch);
                doc.to_state()?
            }
            None => AttackState::new(job.init.clone(), &job.cfg),
        };
        let ck_dir = dir.join("checkpoints");
        let patch_id = job.patch_id.clone();
        let hash = ctx.hash.clone();
        let state = resume_attack(model, &scenes, state, &job.cfg, |s| {
            let last = s.trace.records.last().expect("one epoch done");
            if s.epoch % CHECKPOINT_EVERY == 0 {
                log::info!("{patch_id} epoch {} L {:.5} L_obj {:.5} L_tv {:.3} lr {}", last.epoch, last.loss, last.l_obj, last.l_tv, last.lr);
                let doc = CheckpointDoc::from_state(&patch_id, &hash, s);
                write_json(&ck_dir.join(format!("{patch_id}-e{:04}.json", s.epoch)), &doc)
                    .map_err(|e| cba_core::Error::Usage(e.to_string()))?;
            } else {
                log::debug!("{patch_id} epoch {} L {:.5}", last.epoch, last.loss);
            }
            Ok(())
        })
        .map_err(|e| match e {
            // a failed checkpoint write surfaces as an IO problem, not a numerical one
            cba_core::Error::Usage(m) => LabError::Format(m),
            cba_core::Error::Attack { .. } => LabError::Attack(e),
            other => LabError::from(other),
        })?;
        write_text(&dir.join(format!("trace-{}.csv", job.patch_id)), &trace_csv(&state.trace))?;
        let doc = PatchDoc {
            patch_id: job.patch_id.clone(),
            config_hash: ctx.hash.clone(),
            model_id: model_id.clone(),
            placement: job.cfg.placement,
            r_s: job.cfg.r_s,
            r_d: job.cfg.r_d,
            seed: job.cfg.seed,
            parts: PatchParts::from_patch(&state.patch),
        };
        write_patch(&dir, &doc, &state.patch)?;
        let last = state.trace.records.last().expect("at least one epoch");
        println!("patch {}: final L_obj {} L_tv {}", job.patch_id, last.l_obj, last.l_tv);
    }
    finish_run(&dir, Stage::Attacks, &ctx.hash)?;
    Ok(dir)
}

fn load_patches(ctx: &Context, dir: &Path, model_ids: &[String]) -> LabResult<Vec<PatchDoc>> {
    let mut docs = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(LabError::io(dir))? {
        let path = entry.map_err(LabError::io(dir))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if path.extension().is_some_and(|e| e == "json") && name != crate::store::MANIFEST {
            let doc: PatchDoc = read_json(&path)?;
            ctx.check(&format!("patch {}", doc.patch_id), &doc.config_hash)?;
            if !doc.model_id.is_empty() && !model_ids.contains(&doc.model_id) {
                return Err(LabError::Missing(format!("patch {} names unknown model `{}`", doc.patch_id, doc.model_id)));
            }
            docs.push(doc);
        }
    }
    docs.sort_by(|a, b| a.patch_id.cmp(&b.patch_id));
    Ok(docs)
}

fn placement_cfg(base: &AttackConfig, doc: &PatchDoc) -> AttackConfig {
    AttackConfig { placement: doc.placement, r_s: doc.r_s, r_d: doc.r_d, ..base.clone() }
}

/// Reports for every (patch, model) pair, the transfer matrix with its heat
/// map and the transform-robustness comparison.
pub fn eval(cfg: &RunConfig, opts: &Options) -> LabResult<PathBuf> {
    let ctx = Context::new(cfg, opts)?;
    let index = ctx.scene_index()?;
    let models = ctx.models()?;
    let model_ids: Vec<String> = models.iter().map(|m| m.0.clone()).collect();
    let attack_dir = latest_run(&opts.out, Stage::Attacks)?;
    let docs = load_patches(&ctx, &attack_dir, &model_ids)?;
    let scenes = index.load_split("eval")?;
    let seeds: Vec<u64> = index.split("eval")?.iter().map(|s| s.seed).collect();
    let settings = cfg.eval.detect;
    let acfg = ctx.attack_cfg();
    let dir = new_run_dir(&opts.out, Stage::Eval)?;

    let mut reports = csv::Writer::from_writer(Vec::new());
    reports
        .write_record(["config_hash", "patch_id", "model_id", "ap", "mean_confidence", "protected_mean_confidence"])
        .expect("in memory");
    let mut targets = csv::Writer::from_writer(Vec::new());
    targets.write_record(["patch_id", "model_id", "target", "scene_seed", "confidence"]).expect("in memory");
    let n_protected = cfg.eval.protected_targets;

    let mut rows: Vec<(String, Vec<SceneSample>)> = vec![("clean".into(), scenes.clone())];
    for doc in &docs {
        rows.push((doc.patch_id.clone(), patch_scenes_plain(&scenes, &doc.parts.to_patch()?, &placement_cfg(&acfg, doc))?));
    }
    for (patch_id, patched) in &rows {
        for (model_id, model) in &models {
            let ap = pseudo_gt_ap(model, &scenes, patched, &settings)?;
            let (per_target, m) = mean_target_confidence(model, patched, &settings)?;
            let protected = mean(&per_target[..n_protected.min(per_target.len())]);
            reports
                .write_record([&ctx.hash, patch_id, model_id, &ap.to_string(), &m.to_string(), &protected.to_string()])
                .expect("in memory");
            let mut k = 0;
            for (scene, seed) in patched.iter().zip(&seeds) {
                for _ in &scene.targets {
                    targets
                        .write_record([patch_id, model_id, &k.to_string(), &seed.to_string(), &per_target[k].to_string()])
                        .expect("in memory");
                    k += 1;
                }
            }
            println!("{patch_id} on {model_id}: AP {ap:.4} mean confidence {m:.4} protected {protected:.4}");
        }
    }
    write_csv(&dir.join("reports.csv"), reports)?;
    write_csv(&dir.join("targets.csv"), targets)?;

    // transfer matrix over the patches that share the CBA placement
    let transfer_docs: Vec<&PatchDoc> = docs.iter().filter(|d| d.placement == acfg.placement).collect();
    let patches: Vec<(String, MaskedPatch)> =
        transfer_docs.iter().map(|d| Ok((d.patch_id.clone(), d.parts.to_patch()?))).collect::<LabResult<_>>()?;
    let matrix = transfer_matrix(&models, &patches, &settings, |p| patch_scenes_plain(&scenes, p, &acfg))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["patch_id".to_string()];
    header.extend(matrix.cols.iter().cloned());
    w.write_record(&header).expect("in memory");
    for (r, row) in matrix.rows.iter().zip(&matrix.cells) {
        let mut rec = vec![r.clone()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec).expect("in memory");
    }
    write_csv(&dir.join("transfer.csv"), w)?;
    images::write_heat_map(&dir.join("transfer.png"), &matrix.cells, 32)?;

    if cfg.eval.eot_draws > 0 {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["patch_id", "model_id", "training_draws", "held_out_draws", "relative_gap"]).expect("in memory");
        for doc in docs.iter().filter(|d| d.patch_id.starts_with("cba-")) {
            let model = &models[model_ids.iter().position(|m| *m == doc.model_id).expect("checked on load")].1;
            let cmp = eot_comparison(model, &scenes, &doc.parts.to_patch()?, &acfg, &settings, cfg.eval.eot_draws, cfg.seeded(cfg.eval.eot_seed))?;
            w.write_record([
                doc.patch_id.clone(),
                doc.model_id.clone(),
                cmp.training_mean().to_string(),
                cmp.held_out_mean().to_string(),
                cmp.relative_gap().to_string(),
            ])
            .expect("in memory");
        }
        write_csv(&dir.join("eot.csv"), w)?;
    }
    finish_run(&dir, Stage::Eval, &ctx.hash)?;
    Ok(dir)
}

/// The CBA attack against the first configured model once per alpha.
pub fn ablate_tv(cfg: &RunConfig, opts: &Options) -> LabResult<PathBuf> {
    let ctx = Context::new(cfg, opts)?;
    let index = ctx.scene_index()?;
    let models = ctx.models()?;
    let (model_id, model) = &models[0];
    let attack_scenes = index.load_split("attack")?;
    let eval_scenes = index.load_split("eval")?;
    let base = ctx.original_patch()?;
    let acfg = ctx.attack_cfg();
    let dir = new_run_dir(&opts.out, Stage::Ablation)?;
    let rows = tv_ablation(&cfg.ablation.alphas, &acfg, model, &attack_scenes, &base, |p| {
        let patched = patch_scenes_plain(&eval_scenes, p, &acfg)?;
        Ok(mean_target_confidence(model, &patched, &cfg.eval.detect)?.1)
    })?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["alpha", "final_tv", "mean_confidence"]).expect("in memory");
    for (i, (row, patch)) in rows.iter().enumerate() {
        w.write_record([row.alpha.to_string(), row.final_tv.to_string(), row.mean_confidence.to_string()]).expect("in memory");
        let doc = PatchDoc {
            patch_id: format!("alpha-{i}"),
            config_hash: ctx.hash.clone(),
            model_id: model_id.clone(),
            placement: acfg.placement,
            r_s: acfg.r_s,
            r_d: acfg.r_d,
            seed: acfg.seed,
            parts: PatchParts::from_patch(patch),
        };
        write_patch(&dir, &doc, patch)?;
        println!("alpha {}: final L_tv {} mean confidence {}", row.alpha, row.final_tv, row.mean_confidence);
    }
    write_csv(&dir.join("ablation.csv"), w)?;
    finish_run(&dir, Stage::Ablation, &ctx.hash)?;
    Ok(dir)
}
