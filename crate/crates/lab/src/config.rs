//! The run configuration: one TOML document per experiment.

use std::path::{Path, PathBuf};

use cba_core::attack::AttackConfig;
use cba_core::detector::{TrainConfig, Variant};
use cba_core::eval::DetectSettings;
use cba_core::masking::DEFAULT_SALIENCY_THRESHOLD;
use cba_core::SceneSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, LabResult};

/// Consecutive scene seeds `first_seed..first_seed + count`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub first_seed: u64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenesConfig {
    pub spec: SceneSpec,
    /// Detector training set.
    pub train: Split,
    /// Held-out scenes for the detector's labelled AP.
    pub held_out: Split,
    /// Scenes the patch is optimized on.
    pub attack: Split,
    /// Held-out scenes for the efficacy reports.
    pub eval: Split,
}

impl Default for ScenesConfig {
    fn default() -> Self {
        Self {
            spec: SceneSpec::default(),
            train: Split { first_seed: 0, count: 200 },
            held_out: Split { first_seed: 10_000, count: 50 },
            attack: Split { first_seed: 20_000, count: 40 },
            eval: Split { first_seed: 30_000, count: 50 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// One model is trained per variant; the first one is the white-box
    /// victim for `ablate-tv`.
    pub variants: Vec<Variant>,
    pub num_classes: usize,
    pub init_seed: u64,
    pub training: TrainConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            variants: vec![Variant::Small],
            num_classes: 1,
            init_seed: 1,
            training: TrainConfig { epochs: 40, ..TrainConfig::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchConfig {
    pub side: usize,
    /// Seed of the rendered original aircraft.
    pub original_seed: u64,
    /// Seed of the background initialisation.
    pub init_seed: u64,
    pub saliency_threshold: f64,
    /// Seed of the random-background baseline.
    pub random_baseline_seed: u64,
    /// Also train a full square patch centred on each target with the same
    /// number of optimizable pixels.
    pub on_target_baseline: bool,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            side: 32,
            original_seed: 7,
            init_seed: 1,
            saliency_threshold: DEFAULT_SALIENCY_THRESHOLD,
            random_baseline_seed: 99,
            on_target_baseline: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub detect: DetectSettings,
    /// Leading targets of the eval split reported separately.
    pub protected_targets: usize,
    /// Random transform draws for the robustness report; 0 disables it.
    pub eot_draws: usize,
    pub eot_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            detect: DetectSettings::default(),
            protected_targets: 18,
            eot_draws: 20,
            eot_seed: 0xE07,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub alphas: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { alphas: vec![0.0, 0.15, 1.5, 15.0, 150.0] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed. Every other seed is offset by `seed << 32`, so seed 0
    /// leaves the per-section seeds as written.
    pub seed: u64,
    /// Default for `--out`.
    pub out_dir: Option<PathBuf>,
    pub scenes: ScenesConfig,
    pub detector: DetectorConfig,
    pub patch: PatchConfig,
    pub attack: AttackConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> LabResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> LabResult<Self> {
        let text = std::fs::read_to_string(path).map_err(LabError::io(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> LabResult<()> {
        let bad = |m: String| Err(LabError::Config(m));
        self.scenes.spec.validate()?;
        for (name, split) in self.splits() {
            if split.count == 0 {
                return bad(format!("scene split `{name}` is empty"));
            }
        }
        if self.detector.variants.is_empty() {
            return bad("detector.variants is empty".into());
        }
        let mut seen = self.detector.variants.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.detector.variants.len() {
            return bad("detector.variants lists a variant twice".into());
        }
        if self.detector.num_classes == 0 {
            return bad("detector.num_classes must be positive".into());
        }
        let t = &self.detector.training;
        if t.epochs == 0 || t.batch_size == 0 || !(t.lr > 0.0) {
            return bad(format!("invalid detector.training {t:?}"));
        }
        if self.patch.side < 32 {
            return bad("patch.side must be at least 32".into());
        }
        if !(0.0..1.0).contains(&self.patch.saliency_threshold) {
            return bad("patch.saliency_threshold must lie in [0, 1)".into());
        }
        self.attack.validate()?;
        let d = &self.eval.detect;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(d.conf_threshold) && unit(d.iou_threshold) && unit(d.iou_match)) {
            return bad("eval thresholds must lie in [0, 1]".into());
        }
        if self.ablation.alphas.is_empty() || self.ablation.alphas.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
            return bad("ablation.alphas must be a nonempty list of finite non-negative values".into());
        }
        Ok(())
    }

    pub fn splits(&self) -> [(&'static str, Split); 4] {
        let s = &self.scenes;
        [("train", s.train), ("held_out", s.held_out), ("attack", s.attack), ("eval", s.eval)]
    }

    /// `local` shifted into the block selected by the global seed.
    pub fn seeded(&self, local: u64) -> u64 {
        local.wrapping_add(self.seed << 32)
    }

    /// SHA-256 over the canonical TOML rendering, with `out_dir` left out so
    /// the same experiment hashes the same wherever it is written.
    pub fn hash(&self) -> String {
        let canonical = RunConfig { out_dir: None, ..self.clone() };
        hex::encode(Sha256::digest(canonical.to_toml().as_bytes()))
    }
}
