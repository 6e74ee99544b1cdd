use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (r_eff = {r_eff})")]
    NonFiniteLoss { epoch: usize, batch: usize, r_eff: f64 },

    #[error("non-finite gradient for parameter `{name}` at epoch {epoch}, batch {batch} (r_eff = {r_eff})")]
    NonFiniteUpdate {
        name: String,
        epoch: usize,
        batch: usize,
        r_eff: f64,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("model configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {detail}")]
    Parse { path: PathBuf, line: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteGradient { .. } | Error::NonFiniteLoss { .. } | Error::NonFiniteUpdate { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
