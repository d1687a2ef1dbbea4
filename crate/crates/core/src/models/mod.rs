//! Expectation providers and synthetic data.
//!
//! A provider maps a subset of a bound dataset to the expectation of one or
//! more functionals under the partial posterior conditioned on that subset.

pub mod dataset;
pub mod gaussian;
pub mod loggaussian;
pub mod logistic;
pub mod rff;

use thiserror::Error;

use crate::sampler::SamplerError;

pub use dataset::{Dataset, DatasetError, DatasetHeader, DatasetKind, SyntheticSpec};
pub use gaussian::GaussianMeanModel;
pub use loggaussian::LogGaussianModel;
pub use logistic::LogisticRegressionModel;
pub use rff::{RffBasis, RffRegressionModel};

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("subset of {got} observations is too small (need at least {needed})")]
    SubsetTooSmall { needed: usize, got: usize },
    #[error("observation index {index} out of range for dataset of size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("covariance matrix is not symmetric positive definite")]
    SingularCovariance,
    #[error("normal equations could not be factorized")]
    FactorizationFailure,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

/// Evaluates partial-posterior expectations on subsets of a bound dataset.
///
/// `evaluate` must depend only on the subset and `sub_seed`. Providers are
/// shared read-only between workers.
pub trait ExpectationProvider: Sync {
    fn dataset_size(&self) -> usize;

    fn functional_name(&self) -> String;

    /// Number of functionals returned by [`Self::evaluate`].
    fn output_dim(&self) -> usize {
        1
    }

    /// Index of the reported functional among the outputs.
    fn primary_component(&self) -> usize {
        0
    }

    /// Partial-posterior expectations on the observations listed in `subset`.
    fn evaluate(&self, subset: &[usize], sub_seed: u64) -> Result<Vec<f64>, ProviderError>;
}

impl<P: ExpectationProvider + ?Sized> ExpectationProvider for &P {
    fn dataset_size(&self) -> usize {
        (**self).dataset_size()
    }
    fn functional_name(&self) -> String {
        (**self).functional_name()
    }
    fn output_dim(&self) -> usize {
        (**self).output_dim()
    }
    fn primary_component(&self) -> usize {
        (**self).primary_component()
    }
    fn evaluate(&self, subset: &[usize], sub_seed: u64) -> Result<Vec<f64>, ProviderError> {
        (**self).evaluate(subset, sub_seed)
    }
}

impl<P: ExpectationProvider + ?Sized> ExpectationProvider for Box<P> {
    fn dataset_size(&self) -> usize {
        (**self).dataset_size()
    }
    fn functional_name(&self) -> String {
        (**self).functional_name()
    }
    fn output_dim(&self) -> usize {
        (**self).output_dim()
    }
    fn primary_component(&self) -> usize {
        (**self).primary_component()
    }
    fn evaluate(&self, subset: &[usize], sub_seed: u64) -> Result<Vec<f64>, ProviderError> {
        (**self).evaluate(subset, sub_seed)
    }
}

pub(crate) fn check_subset(subset: &[usize], size: usize) -> Result<(), ProviderError> {
    match subset.iter().find(|&&i| i >= size) {
        Some(&index) => Err(ProviderError::IndexOutOfRange { index, size }),
        None => Ok(()),
    }
}
