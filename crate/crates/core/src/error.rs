use std::path::PathBuf;

/// Errors produced anywhere in the separation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("signal too short: {len} samples, need at least {window}")]
    SignalTooShort { len: usize, window: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate frequency band {0}: zero standard deviation")]
    DegenerateBand(usize),

    #[error("wav: {0}")]
    Wav(String),

    #[error("empty source under threshold (source {0})")]
    EmptySource(usize),

    #[error("source with no bins (source {0})")]
    SourceWithNoBins(usize),

    #[error("silent source {0}: zero power")]
    SilentSource(usize),

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("no cluster structure: all embeddings identical")]
    NoClusterStructure,

    #[error("degenerate reference set")]
    DegenerateReferences,

    #[error("zero reference signal")]
    ZeroReference,

    #[error("{format} format error: {msg}")]
    Format { format: &'static str, msg: String },

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
