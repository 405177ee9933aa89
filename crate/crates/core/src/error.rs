//! Crate-level error type.

use thiserror::Error;

use crate::calibration::CalibrationError;
use crate::data::DataError;
use crate::estimators::EstimatorError;
use crate::features::FeatureError;
use crate::inference::InferenceError;
use crate::nuisance::FitError;
use crate::policy::PolicyError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("{model} model: {source}")]
    Fit {
        model: &'static str,
        #[source]
        source: FitError,
    },
    #[error("calibration: {0}")]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("bootstrap: {0}")]
    Inference(#[from] InferenceError),
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error on `{path}`: {message}")]
    Io { path: String, message: String },
}

impl Error {
    pub(crate) fn fit(model: &'static str) -> impl FnOnce(FitError) -> Error {
        move |source| Error::Fit { model, source }
    }

    /// Whether the failure is numerical (a solver or estimator breaking down)
    /// rather than a problem with the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Fit { source, .. } => !matches!(
                source,
                FitError::DimensionMismatch { .. } | FitError::InvalidWeights | FitError::InvalidBandwidth
            ),
            Error::Calibration(e) => !matches!(e, CalibrationError::DimensionMismatch { .. }),
            Error::Estimator(e) => matches!(
                e,
                EstimatorError::DegenerateWeights { .. } | EstimatorError::ZeroSurvival
            ),
            Error::Inference(e) => matches!(e, InferenceError::ReplicatesFailed { .. }),
            Error::Fold { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
