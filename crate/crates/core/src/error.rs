use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// The model architecture is malformed.
    #[error("invalid model spec: {0}")]
    Spec(String),

    /// Inputs do not match the shape a model or operation expects.
    #[error("input error: {0}")]
    Input(String),

    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    /// A persisted artifact could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no watermark material: the protected model makes no usable misclassifications")]
    NoWatermarkMaterial,

    #[error("requested {requested} watermarks but only {available} candidates are available")]
    InsufficientCandidates { requested: usize, available: usize },

    #[error("cannot fit classifier for watermark {index}: {reason}")]
    Fit { index: usize, reason: String },

    #[error("repetition {repetition}: {source}")]
    Repetition {
        repetition: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Spec(_) => "spec",
            Error::Input(_) => "input",
            Error::Divergence { .. } => "divergence",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::NoWatermarkMaterial => "no_watermark_material",
            Error::InsufficientCandidates { .. } => "insufficient_candidates",
            Error::Fit { .. } => "fit",
            Error::Repetition { source, .. } => source.kind(),
            Error::Io(_) => "io",
        }
    }
}
