use std::fmt;

use cogload::data::DataError;
use cogload::estimators::EstimatorError;
use cogload::explain::ExplainError;
use cogload::features::FeatureError;
use cogload::harness::HarnessError;
use cogload::preprocess::PreprocessError;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_STREAM: i32 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_NUMERIC,
            message: message.into(),
        }
    }

    pub fn stream(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_STREAM,
            message: message.into(),
        }
    }

    pub fn io(path: &std::path::Path, e: impl fmt::Display) -> Self {
        Self::data(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn data_code(e: &DataError) -> i32 {
    match e {
        DataError::InvalidConfig(_) => EXIT_CONFIG,
        _ => EXIT_DATA,
    }
}

fn feature_code(e: &FeatureError) -> i32 {
    match e {
        FeatureError::Unsupported(_) => EXIT_CONFIG,
        _ => EXIT_DATA,
    }
}

fn estimator_code(e: &EstimatorError) -> i32 {
    match e {
        EstimatorError::NonFinite(_) | EstimatorError::ConstantInput => EXIT_NUMERIC,
        EstimatorError::InvalidConfig(_) | EstimatorError::DimensionMismatch { .. } => EXIT_CONFIG,
        EstimatorError::TooFewSamples { .. } | EstimatorError::Format { .. } | EstimatorError::Io { .. } => EXIT_DATA,
    }
}

fn explain_code(e: &ExplainError) -> i32 {
    match e {
        ExplainError::BadChannelIndex { .. }
        | ExplainError::BudgetExceeded(_)
        | ExplainError::EmptyGroup(_)
        | ExplainError::InvalidTree(_) => EXIT_CONFIG,
        ExplainError::NonFinite(_) => EXIT_NUMERIC,
        ExplainError::Io { .. } => EXIT_DATA,
        ExplainError::Feature(f) => feature_code(f),
        ExplainError::Estimator(f) => estimator_code(f),
    }
}

fn harness_code(e: &HarnessError) -> i32 {
    match e {
        HarnessError::Config(_) | HarnessError::Isolation(_) => EXIT_CONFIG,
        HarnessError::TooFewParticipants(_) | HarnessError::Preprocess(_) | HarnessError::Io { .. } => EXIT_DATA,
        HarnessError::Data(d) => data_code(d),
        HarnessError::Feature(f) => feature_code(f),
        HarnessError::Estimator(f) => estimator_code(f),
        HarnessError::Explain(f) => explain_code(f),
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        Self {
            code: harness_code(&e),
            message: e.to_string(),
        }
    }
}

macro_rules! via_harness {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                HarnessError::from(e).into()
            }
        }
    )*};
}

via_harness!(DataError, PreprocessError, FeatureError, EstimatorError, ExplainError);
