use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("missing directory {0}")]
    MissingDirectory(PathBuf),

    #[error("empty class {0}")]
    EmptyClass(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("curve csv parse error: {0}")]
    CurveParse(String),

    #[error("codec unavailable: {0}")]
    CodecUnavailable(String),

    #[error("codec failure: {0}")]
    Codec(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("curves disjoint: accuracy ranges do not overlap")]
    CurvesDisjoint,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
