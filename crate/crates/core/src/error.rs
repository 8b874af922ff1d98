use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Failure modes of the attack laboratory.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Shapes, strides or parameters that do not fit together.
    Config(String),
    /// A mathematically undefined request, e.g. reducing an empty tensor.
    Domain(String),
    /// API misuse, e.g. calling backward on a non-scalar.
    Usage(String),
    /// The original patch produced no usable foreground.
    Masking(String),
    /// A patch footprint that misses the image entirely.
    Placement(String),
    /// Scene generation could not place all objects.
    Generation(String),
    /// Detector training produced a non-finite loss.
    Training { epoch: usize, message: String },
    /// Patch optimization produced a non-finite loss.
    Attack { iteration: usize, message: String },
    /// An evaluation protocol has nothing to measure.
    Evaluation(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Masking(m) => write!(f, "masking error: {m}"),
            Error::Placement(m) => write!(f, "placement error: {m}"),
            Error::Generation(m) => write!(f, "generation error: {m}"),
            Error::Training { epoch, message } => {
                write!(f, "training error at epoch {epoch}: {message}")
            }
            Error::Attack { iteration, message } => {
                write!(f, "attack error at iteration {iteration}: {message}")
            }
            Error::Evaluation(m) => write!(f, "evaluation error: {m}"),
        }
    }
}

impl core::error::Error for Error {}
