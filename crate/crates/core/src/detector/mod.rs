//! A tiny anchor-free, single-stage grid detector.
//!
//! Each output cell predicts one box as `[tx, ty, tw, th, obj, cls...]`, all
//! passed through a sigmoid: `tx, ty` place the centre inside the cell and
//! `tw, th` are fractions of the image size.

mod attention;
mod decode;
mod train;

pub use attention::attention_map;
pub use decode::{decode, nms, Detection};
pub use train::{train_detector, TrainConfig, TrainReport};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

/// Channels before the class scores: box (4) and objectness (1).
pub const BOX_CHANNELS: usize = 4;
pub const OBJ_CHANNEL: usize = 4;
pub const HEAD_FIXED: usize = 5;
/// Output stride shared by all variants.
pub const GRID_STRIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Variant {
    Small,
    Medium,
    Wide,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Small, Variant::Medium, Variant::Wide];

    /// `(out_channels, stride)` of each 3x3 backbone convolution.
    pub fn layers(self) -> &'static [(usize, usize)] {
        match self {
            Variant::Small => &[(8, 2), (16, 2), (24, 2), (32, 2), (32, 1)],
            Variant::Medium => &[(12, 2), (16, 1), (24, 2), (32, 2), (40, 2), (40, 1)],
            Variant::Wide => &[(16, 2), (32, 2), (48, 2), (64, 2), (64, 1)],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Small => "small",
            Variant::Medium => "medium",
            Variant::Wide => "wide",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorModel {
    pub variant: Variant,
    pub num_classes: usize,
    pub params: Vec<NamedTensor>,
    pub seed: u64,
}

/// Handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardPass {
    /// Last backbone activation, `[1, K, g, g]`.
    pub features: Var,
    /// Raw head output, `[g, g, 5 + classes]`.
    pub logits: Var,
    /// Sigmoid of `logits`.
    pub output: Var,
}

fn param_shapes(variant: Variant, num_classes: usize) -> Vec<(String, Vec<usize>)> {
    let mut shapes = Vec::new();
    let mut cin = 3;
    for (i, &(cout, _)) in variant.layers().iter().enumerate() {
        shapes.push((format!("conv{i}.weight"), alloc::vec![cout, cin, 3, 3]));
        shapes.push((format!("conv{i}.bias"), alloc::vec![cout]));
        cin = cout;
    }
    shapes.push(("head.weight".into(), alloc::vec![HEAD_FIXED + num_classes, cin, 1, 1]));
    shapes.push(("head.bias".into(), alloc::vec![HEAD_FIXED + num_classes]));
    shapes
}

impl DetectorModel {
    /// He-uniform initialisation; the objectness bias starts negative so the
    /// untrained model predicts mostly background.
    pub fn new(variant: Variant, num_classes: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[0xDE7]);
        let params = param_shapes(variant, num_classes)
            .into_iter()
            .map(|(name, shape)| {
                let value = if shape.len() == 4 {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    let bound = libm::sqrt(6.0 / fan_in);
                    Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound))
                } else if name == "head.bias" {
                    Tensor::from_fn(&shape, |i| if i == OBJ_CHANNEL { -2.0 } else { 0.0 })
                } else {
                    Tensor::zeros(&shape)
                };
                NamedTensor { name, value }
            })
            .collect();
        Self { variant, num_classes, params, seed }
    }

    /// All parameters zero; every output channel is then exactly 0.5.
    pub fn zeroed(variant: Variant, num_classes: usize) -> Self {
        let params = param_shapes(variant, num_classes)
            .into_iter()
            .map(|(name, shape)| NamedTensor { name, value: Tensor::zeros(&shape) })
            .collect();
        Self { variant, num_classes, params, seed: 0 }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn channels(&self) -> usize {
        HEAD_FIXED + self.num_classes
    }

    pub fn stride(&self) -> usize {
        GRID_STRIDE
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    /// Checks that parameter names and shapes match the architecture.
    pub fn validate(&self) -> Result<()> {
        let expected = param_shapes(self.variant, self.num_classes);
        if expected.len() != self.params.len() {
            return Err(Error::Config(format!(
                "{} parameters for a {} model, expected {}",
                self.params.len(),
                self.variant.name(),
                expected.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(&self.params) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::Config(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.value.shape(),
                    name,
                    shape
                )));
            }
        }
        Ok(())
    }

    /// Registers the parameters as leaves on `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone(), requires_grad)).collect()
    }

    /// Records a forward pass of `image: [3, H, W]` with bound parameters.
    pub fn forward_on(&self, tape: &mut Tape, params: &[Var], image: Var) -> Result<ForwardPass> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Config(format!("detector input must be [3,H,W], got {shape:?}")));
        }
        let (h, w) = (shape[1], shape[2]);
        if h % GRID_STRIDE != 0 || w % GRID_STRIDE != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by the grid stride {GRID_STRIDE}"
            )));
        }
        if params.len() != self.params.len() {
            return Err(Error::Config("parameter handles do not match the model".into()));
        }
        let mut x = tape.reshape(image, &[1, 3, h, w])?;
        for (i, &(_, stride)) in self.variant.layers().iter().enumerate() {
            let conv = tape.conv2d(x, params[2 * i], stride, 1)?;
            let biased = tape.add_channel_bias(conv, params[2 * i + 1])?;
            x = tape.relu(biased);
        }
        let features = x;
        let n = self.variant.layers().len();
        let head = tape.conv2d(features, params[2 * n], 1, 0)?;
        let head = tape.add_channel_bias(head, params[2 * n + 1])?;
        let s = tape.shape(head).to_vec();
        let planes = tape.reshape(head, &[s[1], s[2], s[3]])?;
        let logits = tape.permute(planes, &[1, 2, 0])?;
        let output = tape.sigmoid(logits);
        Ok(ForwardPass { features, logits, output })
    }

    /// Sigmoid outputs `[g, g, 5 + classes]` for one image.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let pass = self.forward_on(&mut tape, &params, x)?;
        Ok(tape.value(pass.output).clone())
    }

    /// Decoded, thresholded and suppressed detections for one image.
    pub fn detect(&self, image: &Tensor, conf_threshold: f64, iou_threshold: f64) -> Result<Vec<Detection>> {
        let raw = self.forward(image)?;
        Ok(decode(&raw, self.stride() as f64, conf_threshold, iou_threshold))
    }
}

/// Flat index of `channel` at grid cell `(row, col)` of a `[g, g, c]` output.
#[inline]
pub fn cell_index(cells: usize, channels: usize, row: usize, col: usize, channel: usize) -> usize {
    (row * cells + col) * channels + channel
}
