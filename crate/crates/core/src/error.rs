use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),

    #[error("joint {joint} has zero degree; enable self-loops or fix the hierarchy")]
    DegenerateDegree { joint: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty body part grouping: {0}")]
    EmptyPart(String),

    #[error("missing part map for skeleton with {0} joints")]
    MissingPartMap(usize),

    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),

    #[error("topology mismatch: {0}")]
    Topology(String),

    #[error("BVH parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unsupported channel `{channel}` at line {line}")]
    UnsupportedChannel { line: usize, channel: String },

    #[error("truncated motion data: expected {expected} values, found {found}")]
    TruncatedData { expected: usize, found: usize },

    #[error("invalid length: {0}")]
    InvalidLength(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for this error's category. Usage errors use 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 3,
            Error::Topology(_) | Error::MissingPartMap(_) | Error::EmptyPart(_) | Error::InvalidSkeleton(_) => 4,
            Error::Io { .. } => 5,
            Error::Parse { .. } | Error::UnsupportedChannel { .. } | Error::TruncatedData { .. } => 6,
            Error::Checkpoint(_) => 7,
            _ => 1,
        }
    }
}
