use debias_core::models::{DatasetError, ProviderError};
use debias_core::streaming::StreamError;
use debias_core::{EstimatorError, ScheduleError};
use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const NUMERICAL: i32 = 3;
    pub const BUDGET: i32 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("budget exceeded: {0}")]
    Budget(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => exit::USAGE,
            CliError::Numerical(_) => exit::NUMERICAL,
            CliError::Budget(_) => exit::BUDGET,
        }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ProviderError> for CliError {
    fn from(e: ProviderError) -> Self {
        match e {
            ProviderError::InvalidModel(_) | ProviderError::DimensionMismatch { .. } => CliError::Config(e.to_string()),
            ProviderError::Sampler(debias_core::sampler::SamplerError::InvalidConfig(_)) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<ScheduleError> for CliError {
    fn from(e: ScheduleError) -> Self {
        match e {
            ScheduleError::NoFiniteMinimum(beta) => CliError::Numerical(format!(
                "{e}. The fitted decay is too slow for a finite-variance estimator with beta={beta}; \
                 use larger pilot levels or set alpha explicitly below 1"
            )),
            ScheduleError::DegenerateInput { .. }
            | ScheduleError::NonPositiveInput
            | ScheduleError::VanishingProbability { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<EstimatorError> for CliError {
    fn from(e: EstimatorError) -> Self {
        match e {
            EstimatorError::LevelExceedsCap { .. } | EstimatorError::ToleranceUnreachable { .. } => {
                CliError::Budget(e.to_string())
            }
            EstimatorError::Provider { source, level } => match CliError::from(source) {
                CliError::Numerical(m) => CliError::Numerical(format!("level {level}: {m}")),
                other => other,
            },
            EstimatorError::Sink(source) => CliError::Io {
                context: "writing replicates".into(),
                source,
            },
            EstimatorError::PathLongerThanSupport { .. }
            | EstimatorError::EmptyPath
            | EstimatorError::OutputDimension { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<StreamError> for CliError {
    fn from(e: StreamError) -> Self {
        match e {
            StreamError::Exhausted { .. } => CliError::Budget(e.to_string()),
            StreamError::Source(d) => d.into(),
            StreamError::Schedule(s) => s.into(),
            StreamError::Estimator(s) => s.into(),
            StreamError::Provider(p) => p.into(),
            StreamError::Invalid(m) => CliError::Config(m),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(format!("json: {e}"))
    }
}
