use std::io;

use thiserror::Error;

pub type Result<T, E = OodError> = std::result::Result<T, E>;

/// Broad failure category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum OodError {
    #[error("numeric overflow computing gram matrix at {}, order {order}", layer_label(*.layer))]
    Overflow { layer: Option<usize>, order: u32 },

    #[error("non-finite value in feature map: {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("table spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("class {class} has no fitted examples")]
    EmptyClass { class: usize },

    #[error("class {class} out of range (table has {num_classes} classes)")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("not enough values: need at least {needed}, got {got}")]
    TooFewValues { needed: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

fn layer_label(layer: Option<usize>) -> String {
    layer.map_or_else(|| "unknown layer".to_string(), |l| format!("layer {l}"))
}

impl OodError {
    pub fn class(&self) -> ErrorClass {
        match self {
            OodError::Overflow { .. } | OodError::NonFinite(_) => ErrorClass::Numeric,
            OodError::InvalidArgument(_) => ErrorClass::Usage,
            _ => ErrorClass::Data,
        }
    }
}

/// Errors decoding the binary activation (GACT) and table (GBND) formats.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("truncated file while reading {context}")]
    Truncated { context: String },

    #[error("record {record}: {reason}")]
    BadRecord { record: u64, reason: String },

    #[error("trailing bytes after {records} declared records")]
    TrailingData { records: u64 },
}
