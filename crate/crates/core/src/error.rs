use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("preference undefined at context {x} for pair ({y}, {y_prime}): zero joint mass")]
    UndefinedPreference {
        x: usize,
        y: usize,
        y_prime: usize,
    },

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("assumption check failed: {0}")]
    Validation(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("toml parse error: {0}")]
    TomlParse(#[from] toml::de::Error),

    #[error("toml encode error: {0}")]
    TomlEncode(#[from] toml::ser::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
