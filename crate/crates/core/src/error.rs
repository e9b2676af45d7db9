use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A vector with zero norm reached an operation that divides by its norm.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid triplet: anchor and negative share time index {0}")]
    InvalidTriplet(usize),

    #[error("malformed batch: {0}")]
    MalformedBatch(String),

    #[error("data quality: {0}")]
    DataQuality(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("probe error: {0}")]
    Probe(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{path}: {source}")]
    File {
        path: std::path::PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn at(self, path: impl Into<std::path::PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }

    /// Process exit code for the command-line tools: 2 config, 3 data, 4 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::DataQuality(_)
            | Error::Stratification(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::MalformedBatch(_) => 3,
            Error::File { source, .. } => source.exit_code(),
            _ => 4,
        }
    }
}
