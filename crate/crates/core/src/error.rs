use crate::vector::ClassId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot normalize a vector of norm {norm:e}")]
    ZeroVector { norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("class {0} already has a prototype in memory")]
    DuplicateClass(ClassId),

    #[error("class {0} has no prototype in memory")]
    MissingClass(ClassId),

    #[error("row {0} has no target class among the classifier weights")]
    MissingTarget(usize),

    #[error("no class has at least {k} examples")]
    EmptyPool { k: usize },

    #[error("requested {requested} classes but only {available} exist")]
    InsufficientClasses { requested: usize, available: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the arithmetic itself rather than of the inputs'
    /// shape or the caller's bookkeeping.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::ZeroVector { .. })
    }
}
