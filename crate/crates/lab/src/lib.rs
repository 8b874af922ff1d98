//! Files, run directories and the command implementations behind `cba`.

pub mod codec;
pub mod commands;
pub mod config;
pub mod error;
pub mod images;
pub mod store;

pub use commands::Options;
pub use config::RunConfig;
pub use error::{LabError, LabResult};
