//! Errors raised by the experiment driver.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Core(#[from] tvmc_core::Error),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown preset {0:?}")]
    UnknownPreset(String),

    #[error("missing checkpoints: {0}")]
    MissingCheckpoints(String),
}

impl CliError {
    /// Short machine-readable category used in the error JSON.
    pub fn kind(&self) -> &'static str {
        use tvmc_core::Error as E;
        match self {
            CliError::Io(_) => "io",
            CliError::Json(_) => "json",
            CliError::Config(_) | CliError::Core(E::InvalidConfig(_)) => "config",
            CliError::UnknownPreset(_) => "unknown_preset",
            CliError::MissingCheckpoints(_) => "missing_checkpoints",
            CliError::Core(E::RankCollapse) => "rank_collapse",
            CliError::Core(E::ResourceLimit { .. }) => "resource_limit",
            CliError::Core(_) => "numerics",
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
