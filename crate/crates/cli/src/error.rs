use thiserror::Error;

use sodkit_core::depth::DepthError;
use sodkit_core::fusion::FusionError;
use sodkit_core::losses::LossError;
use sodkit_core::maps::MapError;
use sodkit_core::metrics::MetricError;
use sodkit_core::weights::WeightError;

/// Failure of a subcommand, split by the exit code it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, unreadable or malformed input files.
    #[error("{0}")]
    Input(String),
    /// An internal invariant did not hold.
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn input(msg: impl Into<String>) -> Self {
        Self::Input(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        Self::Internal(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Input(_) => 1,
            Self::Internal(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

macro_rules! input_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::Input(e.to_string())
            }
        }
    )*};
}

input_errors!(std::io::Error, DepthError, MapError, LossError, MetricError, WeightError, toml::de::Error);

impl From<FusionError> for CliError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::Depth(_) | FusionError::InputDims(..) | FusionError::MissingWeights(_) => {
                Self::Input(e.to_string())
            }
            _ => Self::Internal(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Internal(format!("json: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::Input(format!("csv: {e}"))
    }
}
