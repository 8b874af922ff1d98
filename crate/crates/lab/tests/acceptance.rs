//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use cba_core::attack::{
    baseline_random_patch, full_square_patch, patch_scenes_plain, run_attack, scene_loss, training_draw, AttackConfig,
    AttackTrace, Optimizer, PlacementMode,
};
use cba_core::detector::{train_detector, DetectorModel, TrainConfig, Variant};
use cba_core::eval::{eot_comparison, labelled_ap, mean, mean_target_confidence, pseudo_gt_ap, tv_ablation, DetectSettings};
use cba_core::masking::{MaskedPatch, DEFAULT_SALIENCY_THRESHOLD};
use cba_core::pipeline::{apply_patch, composite, place, Placement};
use cba_core::{generate_scene, render_original_patch, rng, BBox, GroundTruth, SceneSample, SceneSpec, Tape, Tensor};
use evalexpr::{eval_number_with_context, ContextWithMutableVariables, HashMapContext, Value};
use rand::Rng;

const PROTECTED: usize = 18;
const ORIGINAL_SEED: u64 = 3;
const INIT_SEED: u64 = 1;
const RANDOM_SEED: u64 = 99;
const EOT_SEED: u64 = 0xE07;

fn reference_attack() -> AttackConfig {
    AttackConfig {
        alpha: 1e-3,
        lr: 0.03,
        epochs: 200,
        iters_per_epoch: 40,
        optimizer: Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
        ..AttackConfig::default()
    }
}

fn reference_training() -> TrainConfig {
    TrainConfig { epochs: 40, ..TrainConfig::default() }
}

fn scenes(first: u64, count: u64) -> Vec<SceneSample> {
    let spec = SceneSpec::default();
    (first..first + count).map(|s| generate_scene(s, &spec).expect("scene")).collect()
}

struct Outcome {
    pass: bool,
    detail: String,
}

struct Report {
    failed: usize,
}

impl Report {
    fn run(&mut self, label: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        eprintln!("running {label}");
        let t = Instant::now();
        let o = f();
        let elapsed = t.elapsed();
        let pass = o.pass && elapsed <= budget;
        if !pass {
            self.failed += 1;
        }
        println!(
            "{} {label}: {} [{:.1} s, budget {} s]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
}

struct Fixture {
    model: DetectorModel,
    train: Vec<SceneSample>,
    attack: Vec<SceneSample>,
    eval: Vec<SceneSample>,
    base: MaskedPatch,
    cfg: AttackConfig,
    settings: DetectSettings,
    setup: Duration,
}

fn fixture() -> Fixture {
    let t = Instant::now();
    let train = scenes(0, 200);
    let (model, _) = train_detector(&DetectorModel::new(Variant::Small, 1, 1), &train, &reference_training()).expect("training");
    let p0 = render_original_patch(ORIGINAL_SEED, 32).expect("p0");
    let base = MaskedPatch::from_original(p0, DEFAULT_SALIENCY_THRESHOLD, INIT_SEED).expect("masks");
    Fixture {
        model,
        train,
        attack: scenes(20_000, 40),
        eval: scenes(30_000, 50),
        base,
        cfg: reference_attack(),
        settings: DetectSettings::default(),
        setup: t.elapsed(),
    }
}

/// Mean confidence over all targets and over the protected ones.
fn confidences(model: &DetectorModel, patched: &[SceneSample], settings: &DetectSettings) -> (f64, f64) {
    let (all, m) = mean_target_confidence(model, patched, settings).expect("eval");
    (m, mean(&all[..PROTECTED.min(all.len())]))
}

fn gradient_fidelity(fx: &Fixture) -> Outcome {
    let scene = &fx.attack[0];
    let cfg = &fx.cfg;
    let draws: Vec<_> = (0..scene.targets.len()).map(|k| training_draw(cfg, 32, 0, 0, k)).collect();
    let analytic = scene_loss(&fx.model, scene, &fx.base, cfg, &draws).expect("loss").grad;
    let bg: Vec<usize> = (0..fx.base.optimized.numel()).filter(|&i| fx.base.background_mask3().data()[i] == 1.0).collect();
    let mut r = rng::stream(0xF1D, &[]);
    let eps = 1e-4;
    let (mut worst, mut largest, mut max_diff): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..64 {
        let i = bg[r.gen_range(0..bg.len())];
        let loss_at = |delta: f64| {
            let mut p = fx.base.clone();
            p.optimized.data_mut()[i] += delta;
            scene_loss(&fx.model, scene, &p, cfg, &draws).expect("loss").loss
        };
        let numeric = (loss_at(eps) - loss_at(-eps)) / (2.0 * eps);
        let diff = (analytic[i] - numeric).abs();
        largest = largest.max(analytic[i].abs());
        max_diff = max_diff.max(diff);
        let err = if diff <= 1e-6 { 0.0 } else { diff / analytic[i].abs().max(numeric.abs()) };
        worst = worst.max(err);
    }
    Outcome { pass: worst < 1e-3, detail: format!(
            "max relative error {worst:.3e} over 64 background pixels (largest |grad| {largest:.3e}, largest abs difference {max_diff:.3e})"
        ) }
}

fn composition_exactness() -> Outcome {
    let mut r = rng::stream(0xC0, &[]);
    let mut bad = 0;
    for case in 0..100u64 {
        let side = r.gen_range(32..49);
        let p0 = render_original_patch(case, side).expect("p0");
        let mut mp = MaskedPatch::from_original(p0, DEFAULT_SALIENCY_THRESHOLD, case).expect("masks");
        mp.optimized = Tensor::from_fn(mp.original.shape(), |_| r.gen_range(0.0..1.0));
        let composed = mp.composed();
        let fg = mp.foreground_mask3();
        for i in 0..composed.numel() {
            let want = if fg.data()[i] == 1.0 { mp.original.data()[i] } else { mp.optimized.data()[i] };
            if composed.data()[i].to_bits() != want.to_bits() {
                bad += 1;
            }
        }

        let scene = Tensor::from_fn(&[3, 96, 96], |_| r.gen_range(0.0..1.0));
        let pl = Placement { center: (r.gen_range(0.0..96.0), r.gen_range(0.0..96.0)), side: r.gen_range(8.0..40.0), r_d: 4.0, r_s: 1.0 };
        let (out, mask) = composite(&scene, &composed, &pl).expect("composite");
        let mut tape = Tape::new();
        let zero = tape.constant(Tensor::zeros(&[3, 96, 96]));
        let p = tape.constant(composed.clone());
        let placed = apply_patch(&mut tape, zero, p, &pl).expect("place").0;
        let placed = tape.value(placed).clone();
        for i in 0..out.numel() {
            let m = mask.data()[i % (96 * 96)];
            let want = if m == 1.0 { placed.data()[i] } else { scene.data()[i] };
            if (m != 0.0 && m != 1.0) || out.data()[i].to_bits() != want.to_bits() {
                bad += 1;
            }
        }
    }
    Outcome { pass: bad == 0, detail: format!("{bad} mismatching values over 100 cases") }
}

fn geometry_exactness() -> Outcome {
    let mut r = rng::stream(0x6E0, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (x1, y1) = (r.gen_range(0.0..200.0), r.gen_range(0.0..200.0));
        let b = BBox::new(x1, y1, x1 + r.gen_range(1.0..60.0), y1 + r.gen_range(1.0..60.0));
        let (r_d, r_s) = (r.gen_range(0.5..20.0), r.gen_range(0.1..4.0));
        let p = place(&GroundTruth { bbox: b, class_id: 0 }, r_d, r_s);
        let mut ctx = HashMapContext::<evalexpr::DefaultNumericTypes>::new();
        for (k, v) in [("x1", b.x1), ("y1", b.y1), ("x2", b.x2), ("y2", b.y2), ("r_d", r_d), ("r_s", r_s)] {
            ctx.set_value(k.into(), Value::Float(v)).expect("set");
        }
        let e = |s: &str| eval_number_with_context(s, &ctx).expect("eval");
        let want = [e("(x1 + x2) / 2"), e("(y1 + y2) / 2 - (y2 - y1) / r_d"), e("math::sqrt(r_s * (x2 - x1) * (y2 - y1))")];
        for (got, want) in [p.center.0, p.center.1, p.side].into_iter().zip(want) {
            worst = worst.max((got - want).abs());
        }
    }
    Outcome { pass: worst <= 1e-12, detail: format!("max deviation {worst:.2e} over 1000 boxes") }
}

fn clean_ap_identity(fx: &Fixture) -> Outcome {
    let ap = pseudo_gt_ap(&fx.model, &fx.eval, &fx.eval, &fx.settings).expect("ap");
    Outcome { pass: ap == 1.0, detail: format!("pseudo-ground-truth AP of the clean set = {ap}") }
}

struct WhiteBox {
    cba: MaskedPatch,
    trace: AttackTrace,
    random: MaskedPatch,
}

fn white_box(fx: &Fixture) -> (Outcome, WhiteBox) {
    let held_out = scenes(10_000, 50);
    let ap = labelled_ap(&fx.model, &held_out, &fx.settings).expect("ap");
    let (cba, trace) = run_attack(&fx.model, &fx.attack, &fx.base, &fx.cfg).expect("attack");
    let random = baseline_random_patch(&fx.base, RANDOM_SEED).expect("random");
    let on_cfg = AttackConfig { placement: PlacementMode::OnTarget, r_s: fx.cfg.r_s * fx.base.background_fraction(), ..fx.cfg.clone() };
    let (on, _) = run_attack(&fx.model, &fx.attack, &full_square_patch(32, INIT_SEED).expect("square"), &on_cfg).expect("attack");

    let c = confidences(&fx.model, &patch_scenes_plain(&fx.eval, &cba, &fx.cfg).expect("patch"), &fx.settings);
    let r = confidences(&fx.model, &patch_scenes_plain(&fx.eval, &random, &fx.cfg).expect("patch"), &fx.settings);
    let o = confidences(&fx.model, &patch_scenes_plain(&fx.eval, &on, &on_cfg).expect("patch"), &fx.settings);
    let holds = |cba: f64, random: f64, on: f64| cba <= 0.5 * random && cba <= on;
    let pass = ap >= 0.85 && holds(c.1, r.1, o.1) && holds(c.0, r.0, o.0);
    let detail = format!(
        "detector AP {ap:.3}; mean confidence on {PROTECTED} protected targets: CBA {:.3}, random {:.3}, on-target {:.3}; all targets: CBA {:.3}, random {:.3}, on-target {:.3}",
        c.1, r.1, o.1, c.0, r.0, o.0
    );
    (Outcome { pass, detail }, WhiteBox { cba, trace, random })
}

fn black_box(fx: &Fixture, wb: &WhiteBox) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    let cba_scenes = patch_scenes_plain(&fx.eval, &wb.cba, &fx.cfg).expect("patch");
    let random_scenes = patch_scenes_plain(&fx.eval, &wb.random, &fx.cfg).expect("patch");
    for v in [Variant::Medium, Variant::Wide] {
        let (victim, _) = train_detector(&DetectorModel::new(v, 1, 1), &fx.train, &reference_training()).expect("training");
        let c = mean_target_confidence(&victim, &cba_scenes, &fx.settings).expect("eval").1;
        let r = mean_target_confidence(&victim, &random_scenes, &fx.settings).expect("eval").1;
        pass &= c < r;
        parts.push(format!("{}: CBA {c:.3} vs random {r:.3}", v.name()));
    }
    Outcome { pass, detail: format!("patch trained on small; {}", parts.join(", ")) }
}

fn tv_trend(fx: &Fixture) -> Outcome {
    let alphas = [0.0, 0.15, 1.5, 15.0, 150.0];
    let rows = tv_ablation(&alphas, &fx.cfg, &fx.model, &fx.attack, &fx.base, |p| {
        Ok(mean_target_confidence(&fx.model, &patch_scenes_plain(&fx.eval, p, &fx.cfg)?, &fx.settings)?.1)
    })
    .expect("ablation");
    let tv: Vec<f64> = rows.iter().map(|(r, _)| r.final_tv).collect();
    let monotone = tv.windows(2).all(|w| w[1] <= w[0]);
    let ratio = tv[4] / tv[0];
    let listing: Vec<String> = rows.iter().map(|(r, _)| format!("{}: {:.4}", r.alpha, r.final_tv)).collect();
    Outcome {
        pass: monotone && ratio < 0.1,
        detail: format!("final L_tv by alpha [{}]; alpha=150 / alpha=0 = {ratio:.4}", listing.join(", ")),
    }
}

const TINY: &str = r#"
[scenes.train]
first_seed = 0
count = 16
[scenes.held_out]
first_seed = 500
count = 4
[scenes.attack]
first_seed = 900
count = 4
[scenes.eval]
first_seed = 950
count = 6
[detector]
variants = ["small", "medium"]
[detector.training]
epochs = 2
[attack]
epochs = 20
iters_per_epoch = 2
[eval]
eot_draws = 2
[eval.detect]
conf_threshold = 0.01
[ablation]
alphas = [0.0, 1.5]
"#;

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("readable") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).expect("inside").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn reproducibility() -> Outcome {
    use cba_lab::commands::{ablate_tv, attack, eval, gen_scenes, train_detectors};
    let cfg = cba_lab::RunConfig::from_toml(TINY).expect("config");
    let dirs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().expect("tempdir")).collect();
    for d in &dirs {
        let o = cba_lab::Options { out: d.path().to_path_buf(), ..Default::default() };
        gen_scenes(&cfg, &o).expect("scenes");
        train_detectors(&cfg, &o).expect("models");
        attack(&cfg, &o).expect("attack");
        eval(&cfg, &o).expect("eval");
        ablate_tv(&cfg, &o).expect("ablation");
    }
    let (a, b) = (files(dirs[0].path()), files(dirs[1].path()));
    let differing = if a != b {
        a.len().max(b.len())
    } else {
        a.iter()
            .filter(|f| std::fs::read(dirs[0].path().join(f)).ok() != std::fs::read(dirs[1].path().join(f)).ok())
            .count()
    };
    Outcome { pass: differing == 0, detail: format!("{} files per run, {differing} differ", a.len()) }
}

fn eot_robustness(fx: &Fixture, wb: &WhiteBox) -> Outcome {
    let cmp = eot_comparison(&fx.model, &fx.eval, &wb.cba, &fx.cfg, &fx.settings, 20, EOT_SEED).expect("eot");
    let gap = cmp.relative_gap();
    Outcome {
        pass: gap < 0.2,
        detail: format!(
            "mean confidence under 20 training draws {:.4}, under 20 held-out draws {:.4}, relative gap {gap:.3}",
            cmp.training_mean(),
            cmp.held_out_mean()
        ),
    }
}

fn main() {
    let mut report = Report { failed: 0 };
    let mins = |m: u64| Duration::from_secs(60 * m);

    report.run("criterion 2 (composition exactness)", Duration::from_secs(10), composition_exactness);
    report.run("criterion 3 (geometry exactness)", Duration::from_secs(5), geometry_exactness);

    let fx = fixture();
    eprintln!("detector trained in {:.1} s", fx.setup.as_secs_f64());
    report.run("criterion 1 (gradient fidelity)", mins(2), || gradient_fidelity(&fx));
    report.run("criterion 4 (clean AP identity)", Duration::from_secs(30), || clean_ap_identity(&fx));

    // the detector is part of the white-box budget
    let mut wb = None;
    let budget = mins(15).saturating_sub(fx.setup);
    report.run("criterion 5 (white-box efficacy)", budget, || {
        let (o, w) = white_box(&fx);
        wb = Some(w);
        o
    });
    let wb = wb.expect("white-box run");
    report.run("criterion 6 (black-box transfer)", mins(10), || black_box(&fx, &wb));
    report.run("criterion 7 (TV ablation trend)", mins(45), || tv_trend(&fx));
    report.run("criterion 8 (reproducibility)", mins(5), reproducibility);
    report.run("criterion 9 (EOT robustness)", mins(5), || eot_robustness(&fx, &wb));

    // module-level target, reported alongside but not one of the nine
    let first = wb.trace.records.first().map_or(f64::NAN, |r| r.l_obj);
    let last = wb.trace.records.last().map_or(f64::NAN, |r| r.l_obj);
    println!(
        "{} supplementary (epoch-mean L_obj halves over 200 epochs): epoch 0 {first:.4}, final {last:.4}, ratio {:.3}",
        if last < 0.5 * first { "PASS" } else { "FAIL" },
        last / first
    );

    if report.failed > 0 {
        println!("{} of 9 criteria failed", report.failed);
        std::process::exit(1);
    }
    println!("all 9 criteria passed");
}
