use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use cba_core::eval::{labelled_ap, pseudo_gt_ap};
use cba_lab::codec::{encode_f64s, ModelDoc, PatchDoc};
use cba_lab::commands::{ablate_tv, attack, eval, gen_scenes, train_detectors};
use cba_lab::store::{latest_run, read_json, SceneIndex, Stage};
use cba_lab::{LabError, Options, RunConfig};

const TINY: &str = r#"
seed = 0

[scenes.train]
first_seed = 0
count = 12

[scenes.held_out]
first_seed = 500
count = 4

[scenes.attack]
first_seed = 900
count = 3

[scenes.eval]
first_seed = 950
count = 4

[detector]
variants = ["small"]

[detector.training]
epochs = 2

[attack]
epochs = 20
iters_per_epoch = 2
optimizer = { adam = { beta1 = 0.9, beta2 = 0.999, eps = 1e-8 } }
alpha = 0.001

[eval]
eot_draws = 2

[eval.detect]
conf_threshold = 0.01

[ablation]
alphas = [0.0, 15.0]
"#;

fn tiny() -> RunConfig {
    RunConfig::from_toml(TINY).unwrap()
}

fn opts(out: &Path) -> Options {
    Options { out: out.to_path_buf(), ..Options::default() }
}

fn cba(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_cba")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

/// Scenes, models and attacks for `cfg` under `out`.
fn pipeline(cfg: &RunConfig, out: &Path) {
    let o = opts(out);
    gen_scenes(cfg, &o).unwrap();
    train_detectors(cfg, &o).unwrap();
    attack(cfg, &o).unwrap();
}

fn sorted_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = walk(dir);
    v.sort();
    v
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn unknown_keys_are_rejected() {
    let err = RunConfig::from_toml(&format!("{TINY}\n[attack.extra]\nx = 1\n")).unwrap_err();
    assert!(matches!(err, LabError::Config(_)));
    assert!(matches!(RunConfig::from_toml("bogus = 3"), Err(LabError::Config(_))));
}

#[test]
fn small_patch_side_is_rejected() {
    assert!(matches!(RunConfig::from_toml("[patch]\nside = 16"), Err(LabError::Config(_))));
}

#[test]
fn config_round_trips_and_hash_tracks_content() {
    let cfg = tiny();
    let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    let moved = RunConfig { out_dir: Some("/elsewhere".into()), ..cfg.clone() };
    assert_eq!(moved.hash(), cfg.hash());
    let reseeded = RunConfig { seed: 1, ..cfg.clone() };
    assert_ne!(reseeded.hash(), cfg.hash());
}

#[test]
fn gen_scenes_is_deterministic_and_counts_match() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let a = gen_scenes(&cfg, &opts(tmp.path())).unwrap();
    let b = gen_scenes(&cfg, &opts(tmp.path())).unwrap();
    assert_ne!(a, b, "second run gets its own directory");
    assert_eq!(fs::read(a.join("index.json")).unwrap(), fs::read(b.join("index.json")).unwrap());
    let pngs = walk(&a).into_iter().filter(|p| p.extension().is_some_and(|e| e == "png")).count();
    assert_eq!(pngs, 12 + 4 + 3 + 4);
    let index: SceneIndex = read_json(&a.join("index.json")).unwrap();
    assert_eq!(index.config_hash, cfg.hash());
    assert_eq!(index.load_split("eval").unwrap().len(), 4);
}

#[test]
fn unwritable_output_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &tiny());
    // a regular file where the output directory should go
    let out = tmp.path().join("blocked");
    fs::write(&out, b"not a directory").unwrap();
    let (code, _, err) = cba(&["gen-scenes", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn bad_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.toml");
    fs::write(&config, "nonsense = true\n").unwrap();
    let (code, _, _) = cba(&["gen-scenes", "--config", config.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code, 2);
}

#[test]
fn train_without_scenes_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &tiny());
    let out = tmp.path().join("out");
    let (code, _, _) = cba(&["train-detector", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2);
}

#[test]
fn divergent_training_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.detector.training.lr = 1e12;
    cfg.detector.training.clip_norm = 0.0;
    cfg.detector.training.epochs = 4;
    let config = write_config(tmp.path(), &cfg);
    let out = tmp.path().join("out");
    let c = config.to_str().unwrap();
    let o = out.to_str().unwrap();
    assert_eq!(cba(&["gen-scenes", "--config", c, "--out", o]).0, 0);
    let (code, _, err) = cba(&["train-detector", "--config", c, "--out", o]);
    assert_eq!(code, 3, "{err}");
}

#[test]
fn printed_ap_matches_recomputation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let config = write_config(tmp.path(), &cfg);
    let (c, o) = (config.to_str().unwrap(), tmp.path().to_str().unwrap());
    assert_eq!(cba(&["gen-scenes", "--config", c, "--out", o, "-q"]).0, 0);
    let (code, stdout, _) = cba(&["train-detector", "--config", c, "--out", o, "-q"]);
    assert_eq!(code, 0);
    let printed: f64 = stdout.trim().rsplit(' ').next().unwrap().parse().unwrap();
    let doc: ModelDoc = read_json(&latest_run(tmp.path(), Stage::Models).unwrap().join("small.json")).unwrap();
    let index: SceneIndex = read_json(&latest_run(tmp.path(), Stage::Scenes).unwrap().join("index.json")).unwrap();
    let ap = labelled_ap(&doc.to_model().unwrap(), &index.load_split("held_out").unwrap(), &cfg.eval.detect).unwrap();
    assert_eq!(printed, ap);
    assert_eq!(doc.held_out_ap, ap);
}

#[test]
fn model_training_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let o = opts(tmp.path());
    gen_scenes(&cfg, &o).unwrap();
    let a = train_detectors(&cfg, &o).unwrap();
    let b = train_detectors(&cfg, &o).unwrap();
    assert_eq!(fs::read(a.join("small.json")).unwrap(), fs::read(b.join("small.json")).unwrap());
}

#[test]
fn attack_without_model_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &tiny());
    let (c, o) = (config.to_str().unwrap(), tmp.path().to_str().unwrap());
    assert_eq!(cba(&["gen-scenes", "--config", c, "--out", o]).0, 0);
    assert_eq!(cba(&["attack", "--config", c, "--out", o]).0, 2);
}

#[test]
fn non_finite_attack_exits_4_with_iteration() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let o = opts(tmp.path());
    gen_scenes(&cfg, &o).unwrap();
    let models = train_detectors(&cfg, &o).unwrap();
    let path = models.join("small.json");
    let mut doc: ModelDoc = read_json(&path).unwrap();
    let bias = doc.params.last_mut().unwrap();
    bias.tensor.data = encode_f64s(&vec![f64::NAN; bias.tensor.shape[0]]);
    fs::write(&path, serde_json::to_string(&doc).unwrap()).unwrap();
    let config = write_config(tmp.path(), &cfg);
    let (code, _, err) = cba(&["attack", "--config", config.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code, 4, "{err}");
    assert!(err.contains("iteration 0"), "{err}");
}

#[test]
fn zero_lr_attack_keeps_the_initial_patch() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.attack.lr = 0.0;
    cfg.patch.on_target_baseline = false;
    pipeline(&cfg, tmp.path());
    let dir = latest_run(tmp.path(), Stage::Attacks).unwrap();
    let doc: PatchDoc = read_json(&dir.join("cba-small.json")).unwrap();
    let p0 = cba_core::render_original_patch(cfg.patch.original_seed, cfg.patch.side).unwrap();
    let init = cba_core::masking::MaskedPatch::from_original(p0, cfg.patch.saliency_threshold, cfg.patch.init_seed).unwrap();
    assert_eq!(doc.parts.to_patch().unwrap(), init);
}

#[test]
fn resumed_attack_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    pipeline(&cfg, tmp.path());
    let full = latest_run(tmp.path(), Stage::Attacks).unwrap();

    // rebuild the state of a run killed after its first checkpoint
    let cut = tmp.path().join("interrupted");
    fs::create_dir_all(cut.join("checkpoints")).unwrap();
    for id in ["cba-small", "on-target-small"] {
        let name = format!("{id}-e0010.json");
        fs::copy(full.join("checkpoints").join(&name), cut.join("checkpoints").join(&name)).unwrap();
    }
    let o = Options { resume: Some(cut.clone()), ..opts(tmp.path()) };
    attack(&cfg, &o).unwrap();
    for f in ["cba-small.json", "trace-cba-small.csv", "on-target-small.json", "trace-on-target-small.csv", "random.json"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(cut.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn trace_has_the_documented_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig { patch: cba_lab::config::PatchConfig { on_target_baseline: false, ..tiny().patch }, ..tiny() };
    pipeline(&cfg, tmp.path());
    let dir = latest_run(tmp.path(), Stage::Attacks).unwrap();
    let text = fs::read_to_string(dir.join("trace-cba-small.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "epoch,L,L_obj,L_tv,lr,mean_objectness");
    assert_eq!(lines.count(), cfg.attack.epochs);
    let checkpoints = fs::read_dir(dir.join("checkpoints")).unwrap().count();
    assert_eq!(checkpoints, cfg.attack.epochs / 10);
}

#[test]
fn eval_reports_and_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    pipeline(&cfg, tmp.path());
    let o = opts(tmp.path());
    let a = eval(&cfg, &o).unwrap();
    let b = eval(&cfg, &o).unwrap();
    for f in ["reports.csv", "targets.csv", "transfer.csv", "eot.csv", "transfer.png"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let mut reader = csv::Reader::from_path(a.join("reports.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    let clean = rows.iter().find(|r| &r[1] == "clean").unwrap();
    assert_eq!(&clean[3], "1");
    assert!(rows.iter().all(|r| &r[0] == cfg.hash()));

    // rows: every patch with the CBA placement; columns: every model
    let text = fs::read_to_string(a.join("transfer.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "patch_id,small");
    assert_eq!(lines.len(), 1 + 2);
    for line in &lines[1..] {
        let v: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }

    // pseudo AP recomputed from the persisted artifacts
    let index: SceneIndex = read_json(&latest_run(tmp.path(), Stage::Scenes).unwrap().join("index.json")).unwrap();
    let scenes = index.load_split("eval").unwrap();
    let model = read_json::<ModelDoc>(&latest_run(tmp.path(), Stage::Models).unwrap().join("small.json")).unwrap().to_model().unwrap();
    assert_eq!(pseudo_gt_ap(&model, &scenes, &scenes, &cfg.eval.detect).unwrap(), 1.0);
}

#[test]
fn eval_refuses_foreign_artifacts_unless_told() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    pipeline(&cfg, tmp.path());
    let other = RunConfig { eval: cba_lab::config::EvalConfig { eot_draws: 1, ..cfg.eval.clone() }, ..cfg.clone() };
    let config = write_config(tmp.path(), &other);
    let (c, o) = (config.to_str().unwrap(), tmp.path().to_str().unwrap());
    let (code, _, err) = cba(&["eval", "--config", c, "--out", o, "-q"]);
    assert_eq!(code, 2);
    assert!(err.contains("hash mismatch"), "{err}");
    let (code, _, err) = cba(&["eval", "--config", c, "--out", o, "-q", "--allow-hash-mismatch"]);
    assert_eq!(code, 0, "{err}");
}

#[test]
fn eval_rejects_patch_for_unknown_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    pipeline(&cfg, tmp.path());
    let dir = latest_run(tmp.path(), Stage::Attacks).unwrap();
    let path = dir.join("cba-small.json");
    let mut doc: PatchDoc = read_json(&path).unwrap();
    doc.model_id = "huge".into();
    fs::write(&path, serde_json::to_string(&doc).unwrap()).unwrap();
    let err = eval(&cfg, &opts(tmp.path())).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(matches!(err, LabError::Missing(_)));
}

#[test]
fn ablation_writes_one_row_per_alpha() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let o = opts(tmp.path());
    gen_scenes(&cfg, &o).unwrap();
    train_detectors(&cfg, &o).unwrap();
    let dir = ablate_tv(&cfg, &o).unwrap();
    let text = fs::read_to_string(dir.join("ablation.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + cfg.ablation.alphas.len());
    assert!(dir.join("alpha-1.png").is_file());
}

#[test]
fn full_pipeline_is_byte_reproducible() {
    let cfg = tiny();
    let runs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for r in &runs {
        pipeline(&cfg, r.path());
        eval(&cfg, &opts(r.path())).unwrap();
    }
    let (a, b) = (sorted_files(runs[0].path()), sorted_files(runs[1].path()));
    let rel = |root: &Path, v: &[PathBuf]| v.iter().map(|p| p.strip_prefix(root).unwrap().to_path_buf()).collect::<Vec<_>>();
    assert_eq!(rel(runs[0].path(), &a), rel(runs[1].path(), &b));
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn shipped_reference_config_is_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml");
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.detector.variants.len(), 3);
    assert_eq!(cfg.attack.iters_per_epoch, 40);
    assert!(matches!(cfg.attack.optimizer, cba_core::attack::Optimizer::Adam { .. }));
}
