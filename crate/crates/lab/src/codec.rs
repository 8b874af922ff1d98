//! Bit-exact JSON encodings of tensors, models, patches and attack
//! checkpoints. Arrays are little-endian f64 in base64, scalars that may be
//! infinite are stored as their bit patterns.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use cba_core::attack::{AttackState, AttackTrace, EpochRecord};
use cba_core::detector::{DetectorModel, NamedTensor, Variant};
use cba_core::masking::MaskedPatch;
use cba_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, LabResult};

pub fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f64s(text: &str) -> LabResult<Vec<f64>> {
    let bytes = STANDARD.decode(text).map_err(|e| LabError::Format(format!("bad base64 array: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(LabError::Format(format!("array payload of {} bytes is not a whole number of f64", bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorDoc {
    pub shape: Vec<usize>,
    pub data: String,
}

impl TensorDoc {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self { shape: t.shape().to_vec(), data: encode_f64s(t.data()) }
    }

    pub fn to_tensor(&self) -> LabResult<Tensor> {
        Ok(Tensor::new(&self.shape, decode_f64s(&self.data)?)?)
    }
}

mod bits {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{:016x}", v.to_bits()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let text = String::deserialize(d)?;
        u64::from_str_radix(&text, 16).map(f64::from_bits).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamDoc {
    pub name: String,
    #[serde(flatten)]
    pub tensor: TensorDoc,
}

/// A trained detector with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDoc {
    pub model_id: String,
    pub config_hash: String,
    pub variant: Variant,
    pub num_classes: usize,
    pub seed: u64,
    /// Labelled AP on the held-out split right after training.
    pub held_out_ap: f64,
    pub epoch_losses: Vec<f64>,
    pub params: Vec<ParamDoc>,
}

impl ModelDoc {
    pub fn new(model_id: &str, config_hash: &str, model: &DetectorModel, held_out_ap: f64, epoch_losses: Vec<f64>) -> Self {
        Self {
            model_id: model_id.into(),
            config_hash: config_hash.into(),
            variant: model.variant,
            num_classes: model.num_classes,
            seed: model.seed,
            held_out_ap,
            epoch_losses,
            params: model.params.iter().map(|p| ParamDoc { name: p.name.clone(), tensor: TensorDoc::from_tensor(&p.value) }).collect(),
        }
    }

    pub fn to_model(&self) -> LabResult<DetectorModel> {
        let params = self
            .params
            .iter()
            .map(|p| Ok(NamedTensor { name: p.name.clone(), value: p.tensor.to_tensor()? }))
            .collect::<LabResult<Vec<_>>>()?;
        let model = DetectorModel { variant: self.variant, num_classes: self.num_classes, params, seed: self.seed };
        model.validate().map_err(|e| LabError::Format(format!("model {}: {e}", self.model_id)))?;
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchParts {
    pub original: TensorDoc,
    pub foreground_mask: TensorDoc,
    pub optimized: TensorDoc,
}

impl PatchParts {
    pub fn from_patch(p: &MaskedPatch) -> Self {
        Self {
            original: TensorDoc::from_tensor(&p.original),
            foreground_mask: TensorDoc::from_tensor(&p.foreground_mask),
            optimized: TensorDoc::from_tensor(&p.optimized),
        }
    }

    pub fn to_patch(&self) -> LabResult<MaskedPatch> {
        Ok(MaskedPatch::new(self.original.to_tensor()?, self.foreground_mask.to_tensor()?, self.optimized.to_tensor()?)?)
    }
}

/// JSON sidecar written next to every patch PNG.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchDoc {
    pub patch_id: String,
    pub config_hash: String,
    /// Model the patch was optimized against; empty for untrained baselines.
    pub model_id: String,
    /// `outside` or `on-target`.
    pub placement: cba_core::attack::PlacementMode,
    /// Size coefficient used when compositing.
    pub r_s: f64,
    pub r_d: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub parts: PatchParts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordDoc {
    pub epoch: usize,
    #[serde(with = "bits")]
    pub loss: f64,
    #[serde(with = "bits")]
    pub l_obj: f64,
    #[serde(with = "bits")]
    pub l_tv: f64,
    #[serde(with = "bits")]
    pub lr: f64,
    #[serde(with = "bits")]
    pub mean_objectness: f64,
    pub skipped: usize,
}

/// Everything needed to continue an attack exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDoc {
    pub patch_id: String,
    pub config_hash: String,
    pub epoch: usize,
    #[serde(with = "bits")]
    pub lr: f64,
    #[serde(with = "bits")]
    pub best_loss: f64,
    pub bad_epochs: usize,
    pub step: u64,
    pub adam_m: String,
    pub adam_v: String,
    pub trace: Vec<RecordDoc>,
    #[serde(flatten)]
    pub parts: PatchParts,
}

impl CheckpointDoc {
    pub fn from_state(patch_id: &str, config_hash: &str, s: &AttackState) -> Self {
        Self {
            patch_id: patch_id.into(),
            config_hash: config_hash.into(),
            epoch: s.epoch,
            lr: s.lr,
            best_loss: s.best_loss,
            bad_epochs: s.bad_epochs,
            step: s.step,
            adam_m: encode_f64s(&s.adam_m),
            adam_v: encode_f64s(&s.adam_v),
            trace: s
                .trace
                .records
                .iter()
                .map(|r| RecordDoc {
                    epoch: r.epoch,
                    loss: r.loss,
                    l_obj: r.l_obj,
                    l_tv: r.l_tv,
                    lr: r.lr,
                    mean_objectness: r.mean_objectness,
                    skipped: r.skipped,
                })
                .collect(),
            parts: PatchParts::from_patch(&s.patch),
        }
    }

    pub fn to_state(&self) -> LabResult<AttackState> {
        let records = self
            .trace
            .iter()
            .map(|r| EpochRecord {
                epoch: r.epoch,
                loss: r.loss,
                l_obj: r.l_obj,
                l_tv: r.l_tv,
                lr: r.lr,
                mean_objectness: r.mean_objectness,
                skipped: r.skipped,
            })
            .collect();
        Ok(AttackState {
            patch: self.parts.to_patch()?,
            epoch: self.epoch,
            lr: self.lr,
            best_loss: self.best_loss,
            bad_epochs: self.bad_epochs,
            step: self.step,
            adam_m: decode_f64s(&self.adam_m)?,
            adam_v: decode_f64s(&self.adam_v)?,
            trace: AttackTrace { records },
        })
    }
}
