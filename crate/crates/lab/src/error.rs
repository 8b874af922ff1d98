use std::path::PathBuf;

/// Everything a subcommand can fail with. Each variant maps to one process
/// exit code.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error("{0}")]
    Format(String),
    #[error("config hash mismatch: {what} was produced by {found}, current config is {expected} (pass --allow-hash-mismatch to use it anyway)")]
    HashMismatch { what: String, expected: String, found: String },
    #[error("detector training failed: {0}")]
    Training(cba_core::Error),
    #[error("attack failed: {0}")]
    Attack(cba_core::Error),
    #[error(transparent)]
    Core(cba_core::Error),
}

pub type LabResult<T> = Result<T, LabError>;

impl LabError {
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Training(_) => 3,
            LabError::Attack(_) => 4,
            _ => 2,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> LabError {
        let path = path.into();
        move |source| LabError::Io { path, source }
    }
}

impl From<cba_core::Error> for LabError {
    fn from(e: cba_core::Error) -> Self {
        match e {
            cba_core::Error::Training { .. } => LabError::Training(e),
            cba_core::Error::Attack { .. } => LabError::Attack(e),
            other => LabError::Core(other),
        }
    }
}
