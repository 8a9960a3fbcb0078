use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("invalid NIfTI file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unsupported NIfTI datatype code {0} (expected 2 or 16)")]
    UnsupportedDatatype(i16),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("lv_fraction {fraction} unattainable on a {grid}^3 grid at {spacing} mm")]
    UnattainableFraction { fraction: f64, grid: usize, spacing: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error in {context}: non-finite value")]
    Numeric { context: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown subject id `{0}`")]
    UnknownSubject(String),

    #[error("kernel weights vanish: target {target} is too far from every training age for sigma {sigma}")]
    DegenerateKernel { target: f64, sigma: f64 },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn numeric(context: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
        }
    }
}

impl From<bincode::Error> for Error {
    fn from(e: bincode::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
