use std::path::PathBuf;

/// Errors raised anywhere in the evaluation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at layer {layer} ({kind}): expected {expected}, got {got:?}")]
    ShapeMismatch {
        layer: usize,
        kind: &'static str,
        expected: String,
        got: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("target logit {target} out of range for {outputs} outputs")]
    TargetOutOfRange { target: usize, outputs: usize },

    #[error("unknown tap `{0}`")]
    UnknownTap(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("bad magic in {what}: expected {expected:?}")]
    BadMagic { what: &'static str, expected: &'static str },

    #[error("unsupported {what} version {found} (expected {expected})")]
    VersionMismatch {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("truncated {what}: needed {needed} bytes, found {found}")]
    Truncated {
        what: &'static str,
        needed: usize,
        found: usize,
    },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    Divergence { epoch: usize, batch: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("insufficient distinct classes: need {needed}, pool has {available}")]
    InsufficientClasses { needed: usize, available: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("LRP: {0}")]
    Lrp(String),

    #[error("empty record set")]
    EmptyRecords,

    #[error("sample id sets differ between series `{a}` and `{b}`")]
    MismatchedIds { a: String, b: String },

    #[error("rendering: {0}")]
    Render(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
