use thiserror::Error;

/// Errors raised by tensor operations and the modules built on top of them.
#[derive(Debug, Error)]
pub enum CsqaError {
    /// Shape disagreement; names the offending axis where one exists.
    #[error("dimension error on axis {axis}: {detail}")]
    Dimension { axis: usize, detail: String },

    /// A constructed configuration violates an invariant.
    #[error("configuration error: {0}")]
    Config(String),

    /// A call that is structurally wrong (bad argument, wrong call order).
    #[error("usage error: {0}")]
    Usage(String),

    /// A forward or backward pass produced NaN/Inf.
    #[error("non-finite value produced by `{op}` (node {node}, shape {shape:?})")]
    NonFinite {
        op: &'static str,
        node: usize,
        shape: Vec<usize>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed on-disk artifact (checkpoint, config, dataset file).
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    /// Training aborted; carries a diagnostic naming the first bad tensor.
    #[error("training aborted: {0}")]
    Train(String),
}

impl CsqaError {
    pub fn dim(axis: usize, detail: impl Into<String>) -> Self {
        CsqaError::Dimension {
            axis,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CsqaError::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable tag, used by the CLI error line and the FFI
    /// status codes.
    pub fn kind(&self) -> &'static str {
        match self {
            CsqaError::Dimension { .. } => "dimension",
            CsqaError::Config(_) => "config",
            CsqaError::Usage(_) => "usage",
            CsqaError::NonFinite { .. } => "nonfinite",
            CsqaError::Io { .. } => "io",
            CsqaError::Format { .. } => "format",
            CsqaError::Train(_) => "train",
        }
    }
}

pub type Result<T> = std::result::Result<T, CsqaError>;
