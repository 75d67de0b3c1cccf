use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the back-end can report. Messages are prefixed with the
/// module that raised them so CLI output points at the right stage.
#[derive(Debug, Error)]
pub enum Error {
    #[error("core: degenerate priors: pi_non + pi_spf must be positive")]
    DegeneratePriors,
    #[error("core: prior out of range: {0}")]
    PriorOutOfRange(String),
    #[error("core: invalid cost model: {0}")]
    InvalidCostModel(String),
    #[error("core: invalid trial id {0:?}")]
    InvalidId(String),
    #[error("core: embedding store: {0}")]
    Embedding(String),

    #[error("decision: miss cost is zero, cost ratios are undefined")]
    ZeroMissCost,
    #[error("decision: calibration needs both classes present")]
    SingleClass,
    #[error("decision: calibration did not converge after {0} iterations")]
    NonConvergence(usize),

    #[error("{module}: length mismatch ({left} vs {right})")]
    LengthMismatch {
        module: &'static str,
        left: usize,
        right: usize,
    },
    #[error("{module}: no trials of class {class}")]
    EmptyClass { module: &'static str, class: &'static str },

    #[error("nn: shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("nn: zero-norm vector")]
    ZeroNorm,
    #[error("nn: tape does not match parameters: {0}")]
    TapeMismatch(String),

    #[error("train: unknown embedding id {0:?}")]
    UnknownEmbedding(String),
    #[error("train: degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("{0}: invalid config: {1}")]
    InvalidConfig(&'static str, String),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("io: line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io: bad magic, not an embedding file")]
    BadMagic,
    #[error("io: unsupported embedding format version {0}")]
    UnsupportedVersion(u8),
    #[error("io: truncated input at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("io: {0} trailing bytes after last entry")]
    TrailingBytes(usize),
    #[error("io: duplicate id {0:?}")]
    DuplicateId(String),
    #[error("io: {0}")]
    Format(String),
}
