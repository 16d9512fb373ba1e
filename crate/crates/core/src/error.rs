//! Error type shared across the crate.

/// Unified error for tensor, model, metrics, and I/O failures.
///
/// Variants are grouped by how callers are expected to react: `Config` means
/// fix your inputs, `Dim`/`Contract` mean a caller bug, `NonFinite`/`Numerical`
/// mean the computation itself broke down.
#[derive(Debug, thiserror::Error)]
pub enum FlowError {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate statistics: {0}")]
    Degenerate(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FlowError>;

impl FlowError {
    /// Prefix an error with the pipeline location that raised it.
    pub fn in_context(self, ctx: &str) -> FlowError {
        match self {
            FlowError::Dim(m) => FlowError::Dim(format!("{ctx}: {m}")),
            FlowError::Contract(m) => FlowError::Contract(format!("{ctx}: {m}")),
            FlowError::Config(m) => FlowError::Config(format!("{ctx}: {m}")),
            FlowError::Degenerate(m) => FlowError::Degenerate(format!("{ctx}: {m}")),
            FlowError::NonFinite(m) => FlowError::NonFinite(format!("{ctx}: {m}")),
            FlowError::Numerical(m) => FlowError::Numerical(format!("{ctx}: {m}")),
            FlowError::Format(m) => FlowError::Format(format!("{ctx}: {m}")),
            e @ FlowError::Io(_) => e,
        }
    }
}
