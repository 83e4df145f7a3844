use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A parameter vector or sufficient statistic lies outside its domain.
    #[error("domain error: {constraint}")]
    Domain { constraint: String },

    /// Every importance weight vanished.
    #[error("degenerate particle system at block {block:?}, step {t}")]
    DegenerateSystem { block: Option<usize>, t: usize },

    /// The backward kernel normaliser Σ_k ω_k m(ξ_k, ξ_ℓ) vanished for some particle.
    #[error("degenerate backward kernel at block {block:?}, step {t}, particle {particle}")]
    DegenerateBackwardKernel {
        block: Option<usize>,
        t: usize,
        particle: usize,
    },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    /// The observation source ran dry before the requested number of blocks.
    #[error("observation stream exhausted after {completed_blocks} complete blocks")]
    Truncated { completed_blocks: usize },

    #[error("size guard violated: {0}")]
    SizeGuard(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn domain(constraint: impl Into<String>) -> Self {
        Error::Domain {
            constraint: constraint.into(),
        }
    }

    /// Attaches a block index to particle degeneracy errors.
    pub fn in_block(self, block: usize) -> Self {
        match self {
            Error::DegenerateSystem { t, .. } => Error::DegenerateSystem {
                block: Some(block),
                t,
            },
            Error::DegenerateBackwardKernel { t, particle, .. } => {
                Error::DegenerateBackwardKernel {
                    block: Some(block),
                    t,
                    particle,
                }
            }
            other => other,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(
            self,
            Error::DegenerateSystem { .. } | Error::DegenerateBackwardKernel { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
