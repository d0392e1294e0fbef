use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {site}: {message}")]
    Shape { site: String, message: String },

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("degenerate features{}: self-HSIC is not positive", unit.map(|u| format!(" at unit {u}")).unwrap_or_default())]
    DegenerateFeatures { unit: Option<usize> },

    #[error("zero-norm input to cosine similarity")]
    ZeroNorm,

    #[error("retained budget {budget} is infeasible for {blocks} blocks (need at least one unit per block)")]
    InfeasibleBudget { budget: usize, blocks: usize },

    #[error("invalid {file} format: {message}")]
    Format { file: &'static str, message: String },

    #[error("invalid value for `{key}`: {message}")]
    InvalidConfig { key: String, message: String },

    #[error("missing {path}: run `{producer}` first")]
    MissingArtifact { path: PathBuf, producer: &'static str },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(site: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Shape {
            site: site.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
