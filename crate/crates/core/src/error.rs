use thiserror::Error;

/// Errors raised by the simulation engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration has {got} sites but the system has {expected}")]
    ConfigurationShape { expected: usize, got: usize },

    #[error("system size {n} exceeds the cap of {cap} sites for {what}")]
    ResourceLimit { what: &'static str, n: usize, cap: usize },

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("invalid cutoff reference: max |psi|^2 must be positive when epsilon > 0 (got {0})")]
    InvalidReference(f64),

    #[error("degenerate sampling target: weight function vanishes everywhere")]
    DegenerateTarget,

    #[error("degenerate importance weights: sum of weights is {0}")]
    DegenerateWeights(f64),

    #[error("rank collapse: every mode of the metric fell below the cutoff")]
    RankCollapse,

    #[error("undefined state: {0}")]
    UndefinedState(&'static str),

    #[error("undefined reference: relative error against a zero reference")]
    UndefinedReference,

    #[error("index {index} out of range (bound {bound})")]
    IndexOutOfRange { index: usize, bound: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
