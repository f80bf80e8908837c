use thiserror::Error;

/// Errors produced across the simulation and verification pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A model specification violates one of its construction invariants.
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    /// An operation was called with arguments outside its contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The forward recursion produced a non-finite value.
    #[error("numerical blowup at step {step} ({context})")]
    NumericalBlowup { step: usize, context: String },

    /// A discrete branch probability left (0, 1); the grid step is too coarse.
    #[error("time step too large: {0}")]
    DtTooLarge(String),

    /// An exhaustive enumeration would exceed the configured budget.
    #[error("resource limit exceeded: {0}")]
    ResourceLimit(String),
}

pub type Result<T> = std::result::Result<T, Error>;
