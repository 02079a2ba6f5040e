use thiserror::Error;

use crate::adcore::AdError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("cholesky failed in layer {layer}{} (pivot {pivot})", datapoint.map(|d| format!(" at datapoint {d}")).unwrap_or_default())]
    Decomposition { layer: usize, datapoint: Option<usize>, pivot: usize },
    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Decomposition { .. } | Error::NonFiniteGradient { .. } | Error::Ad(_))
    }
}
