use alloc::string::String;

/// Errors produced by the simulator and the attacks.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("no target-class signal in update (|grad b_c| = {0:e})")]
    NoSignal(f64),
    #[error("no first-layer unit carries enough gradient to invert")]
    Unrecoverable,
    #[error("degenerate sample (zero spread)")]
    Degenerate,
    #[error("only {usable} usable observations, need at least {needed}")]
    AbortEstimation { usable: usize, needed: usize },
    #[error("gave up after {queries} queries")]
    GiveUp { queries: usize },
    #[error("inconsistent target count estimate {0}")]
    InconsistentCount(f64),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn param(msg: impl Into<String>) -> Error {
    Error::Parameter(msg.into())
}
