//! On-disk layout. Each subcommand writes a fresh numbered directory under
//! `<out>/<stage>/` and finishes it with `manifest.json`; later stages read
//! the newest finished directory of the stage they depend on.

use std::fs;
use std::path::{Path, PathBuf};

use cba_core::{generate_scene, BBox, SceneSample, SceneSpec};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Split};
use crate::error::{LabError, LabResult};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Scenes,
    Models,
    Attacks,
    Eval,
    Ablation,
}

impl Stage {
    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::Scenes => "scenes",
            Stage::Models => "models",
            Stage::Attacks => "attacks",
            Stage::Eval => "eval",
            Stage::Ablation => "ablation",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    /// Files of the run, relative to its directory, sorted.
    pub files: Vec<String>,
}

fn numbered(dir: &Path) -> LabResult<Vec<(u32, PathBuf)>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(LabError::io(dir))? {
        let entry = entry.map_err(LabError::io(dir))?;
        if let Some(n) = entry.file_name().to_str().and_then(|s| s.parse::<u32>().ok()) {
            out.push((n, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Creates the next free `<out>/<stage>/NNN`.
pub fn new_run_dir(out: &Path, stage: Stage) -> LabResult<PathBuf> {
    let parent = out.join(stage.dir_name());
    fs::create_dir_all(&parent).map_err(LabError::io(&parent))?;
    let mut next = numbered(&parent)?.last().map_or(1, |(n, _)| n + 1);
    loop {
        let dir = parent.join(format!("{next:03}"));
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => next += 1,
            Err(e) => return Err(LabError::Io { path: dir, source: e }),
        }
    }
}

/// Newest finished run of `stage`.
pub fn latest_run(out: &Path, stage: Stage) -> LabResult<PathBuf> {
    numbered(&out.join(stage.dir_name()))?
        .into_iter()
        .rev()
        .map(|(_, p)| p)
        .find(|p| p.join(MANIFEST).is_file())
        .ok_or_else(|| LabError::Missing(format!("no finished `{}` run under {}", stage.dir_name(), out.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> LabResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(LabError::io(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> LabResult<T> {
    let text = fs::read_to_string(path).map_err(LabError::io(path))?;
    serde_json::from_str(&text).map_err(|e| LabError::Format(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> LabResult<()> {
    fs::write(path, text).map_err(LabError::io(path))
}

/// Seals a run directory; only sealed runs are visible to later stages.
pub fn finish_run(dir: &Path, stage: Stage, config_hash: &str) -> LabResult<()> {
    let mut files = Vec::new();
    collect(dir, dir, &mut files)?;
    files.retain(|f| f != MANIFEST);
    files.sort();
    write_json(&dir.join(MANIFEST), &Manifest { stage: stage.dir_name().into(), config_hash: config_hash.into(), files })
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<String>) -> LabResult<()> {
    for entry in fs::read_dir(dir).map_err(LabError::io(dir))? {
        let path = entry.map_err(LabError::io(dir))?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("inside root").to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// Refuses an artifact stamped with another config unless allowed.
pub fn check_hash(what: &str, found: &str, expected: &str, allow_mismatch: bool) -> LabResult<()> {
    if found == expected {
        return Ok(());
    }
    if allow_mismatch {
        log::warn!("{what} comes from config {found}, current config is {expected}; continuing as requested");
        return Ok(());
    }
    Err(LabError::HashMismatch { what: what.into(), expected: expected.into(), found: found.into() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexedScene {
    pub seed: u64,
    pub file: String,
    pub boxes: Vec<BBox>,
    pub classes: Vec<usize>,
}

/// The JSON index of a scene run. Scenes are regenerated from their seeds
/// when loaded; the PNGs are for looking at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneIndex {
    pub config_hash: String,
    pub spec: SceneSpec,
    pub splits: Vec<(String, Vec<IndexedScene>)>,
}

pub fn split_seeds(cfg: &RunConfig, split: Split) -> Vec<u64> {
    (0..split.count as u64).map(|i| cfg.seeded(split.first_seed + i)).collect()
}

impl SceneIndex {
    pub fn split(&self, name: &str) -> LabResult<&[IndexedScene]> {
        self.splits
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s.as_slice())
            .ok_or_else(|| LabError::Missing(format!("scene index has no `{name}` split")))
    }

    /// Regenerates a split and checks it against the recorded boxes.
    pub fn load_split(&self, name: &str) -> LabResult<Vec<SceneSample>> {
        self.split(name)?
            .iter()
            .map(|entry| {
                let scene = generate_scene(entry.seed, &self.spec)?;
                let boxes: Vec<BBox> = scene.targets.iter().map(|t| t.bbox).collect();
                if boxes != entry.boxes {
                    return Err(LabError::Format(format!("scene {} no longer matches its index entry", entry.seed)));
                }
                Ok(scene)
            })
            .collect()
    }
}
