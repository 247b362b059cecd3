use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("negative feature value {value} at index {index}")]
    NegativeFeature { index: usize, value: f64 },

    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("class {0} has no support examples")]
    MissingClass(usize),

    #[error("shape mismatch: {0}")]
    ShapeError(String),

    #[error("layer {layer} out of range 0..={max}")]
    InvalidLayer { layer: usize, max: usize },

    #[error("invalid label: {0}")]
    InvalidLabel(String),

    #[error("model has no {0} head")]
    MissingHead(&'static str),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    TrainingDiverged { epoch: usize },

    #[error("format error at byte {offset}: {message}")]
    FormatError { offset: u64, message: String },

    #[error("infeasible episode: class {class} has {available} examples, needs {required}")]
    InfeasibleEpisode {
        class: usize,
        available: usize,
        required: usize,
    },

    #[error("prototype history was not retained")]
    HistoryUnavailable,

    #[error("episode {index} failed: {source}")]
    EpisodeFailed {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by a bad configuration rather than by data or runtime state.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::InvalidConfig(_) | Error::Json(_) => true,
            Error::EpisodeFailed { source, .. } => source.is_config_error(),
            _ => false,
        }
    }
}
