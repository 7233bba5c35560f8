//! One error type for the whole pipeline.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor or grid shapes; names both sides.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Index out of range (class labels, patch coordinates).
    #[error("{what}: index {index} out of range for length {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    /// Invalid configuration or mismatched parameter/gradient keys.
    #[error("configuration: {0}")]
    Config(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Histogram with all mass in a single bin; no threshold exists.
    #[error("degenerate histogram: all mass in one bin")]
    DegenerateHistogram,

    /// A caller-facing contract was violated (e.g. non-unit-norm features).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Dataset cannot support the requested operation (empty class, empty bag).
    #[error("dataset: {0}")]
    Dataset(String),

    /// Metric undefined for the given inputs (e.g. single-class AUC).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Malformed binary artifact; reports the byte offset of the problem.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    /// A stage input produced by an earlier stage is missing.
    #[error("missing dependency: {0}")]
    MissingDependency(PathBuf),

    #[error("i/o on {context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 dependency, 4 numeric, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingDependency(_) => 3,
            Error::Numeric(_) => 4,
            _ => 1,
        }
    }
}
