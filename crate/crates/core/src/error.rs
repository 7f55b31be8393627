use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error: missing required column `{column}`")]
    MissingColumn { column: String },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("cannot stratify: class `{class}` has {count} sample(s), need at least 2")]
    Stratification { class: &'static str, count: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("image decode error for {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),

    #[error("pretrained weights for `{backbone}` not available: {reason}")]
    PretrainedUnavailable { backbone: String, reason: String },

    #[error("model construction error: {0}")]
    Construction(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unsupported layer `{layer}`: {reason}")]
    UnsupportedLayer { layer: String, reason: String },

    #[error("state error: {0}")]
    State(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's configuration rather than by a
    /// failure while running.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::UnknownBackbone(_) | Error::Parameter(_)
        )
    }
}
