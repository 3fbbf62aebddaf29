use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced in {0}")]
    NonFinite(String),
    #[error("degenerate batch: effective per-channel count {0} < 2")]
    DegenerateBatch(usize),
    #[error("label {label} out of range for {num_classes} classes")]
    Label { label: usize, num_classes: usize },
    #[error("structure mismatch: {0}")]
    Structure(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("version mismatch: found {found}, expected {expected}")]
    Version { found: u16, expected: u16 },
    #[error("config error: {0}")]
    Config(String),
    #[error("no rows matched the report filter")]
    EmptyReport,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
