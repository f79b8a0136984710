use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("layer {layer}: expected input shape {expected}, got {actual:?}")]
    Shape {
        layer: String,
        expected: String,
        actual: Vec<usize>,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("backward called for layer {0} without a training-mode forward cache")]
    MissingCache(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("unknown parameter key `{0}`")]
    UnknownParameter(String),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("l_c = {l_c} out of range 0..={max}")]
    FreezeRange { l_c: usize, max: usize },

    #[error("unknown block group `{0}`")]
    UnknownGroup(String),

    #[error("checkpoint: bad magic {0:02x?}")]
    BadMagic(Vec<u8>),

    #[error("checkpoint: unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint: truncated payload at byte {offset} (needed {needed} more bytes)")]
    Truncated { offset: usize, needed: usize },

    #[error("checkpoint: shape/length disagreement: {0}")]
    LengthMismatch(String),

    #[error("checkpoint: CRC mismatch (stored {stored:08x}, computed {computed:08x})")]
    Crc { stored: u32, computed: u32 },

    #[error("checkpoint: architecture fingerprint mismatch (checkpoint {found}, spec {expected})")]
    Fingerprint { expected: String, found: String },

    #[error("transplant: hidden layer {layer} incompatible: {detail}")]
    Transplant { layer: String, detail: String },

    #[error("training diverged at epoch {epoch} (lr {lr}): loss is not finite")]
    Diverged { epoch: usize, lr: f64 },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("analysis: {0}")]
    Analysis(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
