use std::path::PathBuf;

use crate::matrix::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("zero dimension: {0}")]
    ZeroDimension(&'static str),

    #[error("invalid CSR matrix: {}", join_violations(.0))]
    InvalidCsr(Vec<Violation>),

    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("unsupported Matrix Market format: {0}")]
    UnsupportedFormat(String),

    #[error("malformed CSR cache: {0}")]
    Cache(String),

    #[error("thread count must be at least 1")]
    ZeroThreads,

    #[error("batch size must be at least 1")]
    ZeroBatch,

    #[error("diagonal {k} outside [0, {max}]")]
    DiagonalOutOfRange { k: usize, max: usize },

    /// The host lacks an instruction-set extension needed by the requested tier.
    #[error("{0} unavailable")]
    FeatureUnavailable(&'static str),

    #[error("native code generation is not supported on this platform")]
    NativeUnsupported,

    #[error("code buffer: {0}")]
    CodeBuffer(String),

    #[error("kernel has already been released")]
    KernelReleased,

    #[error("kernel is in use by a running worker")]
    KernelInUse,

    #[error("worker thread panicked")]
    WorkerPanicked,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}
