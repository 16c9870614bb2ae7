//! Error type shared by the solver and diagnostic layers.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A quantity that must be strictly positive (density, fit sample, ...)
    /// was not.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid parameter or grid configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// The density dropped below the positivity floor and step rejection
    /// could not recover. `slice` is the y-slice index for slab runs,
    /// `usize::MAX` for 2D runs.
    #[error("density positivity lost at t = {time:.6e} (slice {slice})")]
    PositivityLoss { time: f64, slice: usize },

    /// A non-finite sample appeared in an evolved field.
    #[error("solution blew up at t = {time:.6e} (slice {slice})")]
    Blowup { time: f64, slice: usize },

    /// Fields on incompatible grids or at incompatible times were combined.
    #[error("grid or time mismatch: {0}")]
    Mismatch(String),

    /// The 2D box cannot hold the embedded slab data: eps * half_length_2d
    /// must reach the slab half-length.
    #[error("2D box too small for embedding: eps*L2 = {available:.6e} < L1 = {needed:.6e}")]
    BoxTooSmall { available: f64, needed: f64 },

    /// A diagnostic needed more stored snapshots than the history holds.
    #[error("history too short: {0}")]
    EmptyHistory(String),

    /// Ratio of norms requested for an identically zero field.
    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),

    /// Input rejected by a checker precondition.
    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Checkpoint file malformed.
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn mismatch(msg: impl Into<String>) -> Self {
        Error::Mismatch(msg.into())
    }
}
