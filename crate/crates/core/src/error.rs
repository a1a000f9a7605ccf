use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the search toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform; `axes` names the offending dimensions.
    #[error("dimension error in {op}: {axes}")]
    Dimension { op: &'static str, axes: String },

    #[error("degenerate batch for batch_norm: {count} elements per channel (need at least 2)")]
    DegenerateBatch { count: usize },

    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("invalid input: {0}")]
    Input(String),

    /// A caller broke an API contract (e.g. backward from a non-scalar).
    #[error("contract violated: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Loss exceeded the divergence threshold or became non-finite.
    #[error("training diverged at stage {stage}, epoch {epoch}, step {step}: loss {loss}")]
    Divergence {
        stage: usize,
        epoch: usize,
        step: usize,
        loss: f32,
    },

    #[error("format error in {path}: expected {expected} bytes, found {actual}")]
    Format {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("latency table missing {} entries: {}", .missing.len(), .missing.join("; "))]
    Coverage { missing: Vec<String> },

    #[error("duplicate latency-table key at line {line}: {key}")]
    DuplicateKey { line: usize, key: String },

    #[error("invalid genotype: {0}")]
    Validation(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, axes: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            axes: axes.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl Error {
    /// Process exit status for this error: 1 for bad input or configuration,
    /// 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_)
            | Error::Config(_)
            | Error::Format { .. }
            | Error::Parse { .. }
            | Error::Coverage { .. }
            | Error::DuplicateKey { .. }
            | Error::Validation(_)
            | Error::Json(_) => 1,
            Error::Dimension { .. }
            | Error::DegenerateBatch { .. }
            | Error::Numeric { .. }
            | Error::Contract(_)
            | Error::Divergence { .. }
            | Error::Io { .. }
            | Error::Csv(_) => 2,
        }
    }
}
