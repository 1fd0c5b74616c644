use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid MDP field `{field}`: {message}")]
    InvalidMdp { field: String, message: String },
    #[error("enumeration needs {trajectories} trajectories, above the limit of {limit}")]
    EnumerationBudget { trajectories: u128, limit: u128 },
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps the error with the name of the stage that produced it.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// True for failures of the numerics (non-finite values, singular
    /// solves, domain errors) as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Autodiff(AutodiffError::NotAVariable { .. } | AutodiffError::Dimension(_)) => {
                false
            }
            Error::Autodiff(_) | Error::ZeroVariance(_) => true,
            Error::Stage { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
