//! Error taxonomy shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// NaN or infinity produced or consumed by a numeric operation.
    #[error("numeric-domain error in {op}: non-finite value")]
    NonFinite { op: String },

    /// A caller violated a shape or usage contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration values.
    #[error("configuration error: {0}")]
    Config(String),

    /// A real inverse transform was requested for a spectrum that is not conjugate-symmetric.
    #[error("spectrum is not conjugate-symmetric: imaginary residue {residue:e} exceeds {threshold:e}")]
    Symmetry { residue: f64, threshold: f64 },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("relative error undefined: ground truth has zero norm")]
    UndefinedMetric,

    #[error("bad magic at offset 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated input: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated { offset: usize, needed: usize, len: usize },

    #[error("malformed file at offset {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },

    #[error("corrupt name table at offset {offset}: {msg}")]
    NameTable { offset: usize, msg: String },

    #[error("checkpoint config conflicts with requested run: {0}")]
    ConfigConflict(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
