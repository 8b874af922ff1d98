#![no_std]

extern crate alloc;

pub mod attack;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod masking;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
pub use geometry::BBox;
pub use scene::{generate_scene, generate_scene_detailed, render_original_patch, GroundTruth, SceneSample, SceneSpec};
pub use tensor::{Tape, Tensor, Var};
