use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("missing column \"{column}\"")]
    MissingColumn { column: String },

    #[error("row {row}, column \"{column}\": cannot parse {value:?} as a number")]
    ParseCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}, column \"{column}\": value is not finite")]
    NonFiniteCell { row: usize, column: String },

    #[error("row {row}: engine id {engine} is not in the declared engine set")]
    UnknownEngine { row: usize, engine: u32 },

    #[error("duplicate snapshot for engine {engine} at timestamp {timestamp}")]
    DuplicateKey { engine: u32, timestamp: i64 },

    #[error("variable \"{variable}\" has zero standard deviation")]
    ZeroVariance { variable: String },

    #[error("residual scale of \"{variable}\" is zero; cannot rescale")]
    ZeroResidualScale { variable: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("context cluster {cluster} has no observations")]
    EmptyCluster { cluster: usize },

    #[error("rank-deficient design matrix; aliased columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("engine {engine} was not seen during training")]
    UnseenEngine { engine: u32 },

    #[error("{what} is not positive definite")]
    NotPositiveDefinite { what: String },

    #[error("{what} contains non-finite values")]
    NonFinite { what: String },

    #[error("bundle format version {found:?} is not supported (expected {expected:?})")]
    BundleVersion { found: String, expected: String },

    #[error("verdicts do not cover injection record \"{record}\"")]
    Misaligned { record: String },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
