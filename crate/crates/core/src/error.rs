use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Library-wide error type.
///
/// Variants are grouped by how a caller should react: `Validation`-class
/// errors mean the inputs or configuration were rejected before any real work
/// started, `Runtime`-class errors mean a computation failed midway, and
/// `PartialFailure` means a batch operation finished with some per-item
/// failures collected.
#[derive(Debug, Error)]
pub enum Error {
    /// Configuration rejected (unknown key, out-of-range value, bad combination).
    #[error("config error: {0}")]
    Config(String),

    /// Input data failed validation (shape, range, or consistency check).
    #[error("validation error: {0}")]
    Validation(String),

    /// Shape mismatch between two arrays that must agree.
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    /// Stored artifact (manifest, checkpoint, report) failed to parse or
    /// disagreed with its own header.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// Lookup of a keyed entry (clip id, parameter name) failed.
    #[error("unknown key: {0}")]
    Lookup(String),

    /// A metric or operation is undefined for the given inputs.
    #[error("undefined result: {0}")]
    Undefined(String),

    /// Training diverged (non-finite loss).
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    /// Generic numeric failure at run time.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Report schema version not understood by this build.
    #[error("schema version mismatch: artifact has {found}, this build supports {supported}")]
    SchemaVersion { found: u32, supported: u32 },

    /// A batch operation completed with per-item failures.
    #[error("{failed} of {total} items failed; first failure: {first}")]
    PartialFailure {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for CLI use: 1 validation, 2 runtime, 3 partial failure.
    #[must_use]
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Validation(_)
            | Error::Shape { .. }
            | Error::Ingestion(_)
            | Error::Lookup(_)
            | Error::Undefined(_)
            | Error::SchemaVersion { .. } => 1,
            Error::Divergence { .. } | Error::Numeric(_) | Error::Io(_) | Error::Json(_) => 2,
            Error::PartialFailure { .. } => 3,
        }
    }

    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
