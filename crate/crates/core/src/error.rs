use alloc::string::String;

use crate::graphprior::GraphError;
use crate::mgtnfe::ExtractorError;
use crate::signal::SignalError;
use crate::tensor::TensorError;

/// Any failure of the modeling pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Extractor(#[from] ExtractorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("training diverged at step {step}: total loss {total}")]
    Diverged { step: usize, total: f64 },
}

impl Error {
    /// Failures caused by numerics rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Diverged { .. }
                | Error::Tensor(TensorError::NonFinite { .. })
                | Error::Graph(GraphError::JitterExhausted { .. } | GraphError::NotPositiveDefinite { .. })
        )
    }
}

pub type Result<T> = core::result::Result<T, Error>;
