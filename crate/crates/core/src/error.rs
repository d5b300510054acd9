use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate stroke: {0}")]
    DegenerateStroke(String),

    #[error("empty drawing {drawing_id}: all {dropped} strokes removed by the length filter")]
    EmptyDrawing { drawing_id: String, dropped: usize },

    #[error("invalid mixture parameters: {0}")]
    InvalidParams(String),

    #[error("zero-probability event observed: {0}")]
    ZeroProbability(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss {
        step: usize,
        last_good: Option<Box<crate::training::ModelCheckpoint>>,
    },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint version: {0}")]
    CheckpointVersion(String),

    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-parseable category used by the command line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::DegenerateStroke(_) => "degenerate-stroke",
            Error::EmptyDrawing { .. } => "empty-drawing",
            Error::InvalidParams(_) => "invalid-params",
            Error::ZeroProbability(_) => "zero-probability",
            Error::Parse { .. } => "parse",
            Error::Split(_) => "split",
            Error::NonFiniteGradient(_) => "non-finite-gradient",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::CorruptCheckpoint(_) => "corrupt-checkpoint",
            Error::CheckpointVersion(_) => "checkpoint-version",
            Error::ConfigMismatch(_) => "config-mismatch",
            Error::Degenerate(_) => "degenerate",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
