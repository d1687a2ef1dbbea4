//! Log-normal data with unknown (μ, σ); reports the posterior mean of σ.
//!
//! The prior is flat on (μ, log σ) inside [`MU_BOUND`] and [`LOG_SIGMA_BOUNDS`]
//! and zero outside. The chain runs in coordinates scaled by the approximate
//! posterior standard deviations, so `initial_step` is in units of those.

use super::{check_subset, Dataset, ExpectationProvider, ProviderError};
use crate::sampler::{adaptive_rwm, SamplerConfig};

/// |μ| ≤ MU_BOUND.
pub const MU_BOUND: f64 = 1e3;
/// Support of log σ.
pub const LOG_SIGMA_BOUNDS: (f64, f64) = (-30.0, 30.0);

#[derive(Debug, Clone)]
pub struct LogGaussianModel {
    log_data: Vec<f64>,
    sampler: SamplerConfig,
}

/// Sufficient statistics of the log-data on a subset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogStats {
    pub n: usize,
    pub mean: f64,
    /// Sum of squared deviations from `mean`.
    pub ss: f64,
}

impl LogGaussianModel {
    pub fn new(data: &[f64], sampler: SamplerConfig) -> Result<Self, ProviderError> {
        sampler.validate()?;
        if let Some(bad) = data.iter().find(|&&x| !(x > 0.0 && x.is_finite())) {
            return Err(ProviderError::InvalidModel(format!(
                "log-Gaussian observations must be positive and finite, got {bad}"
            )));
        }
        Ok(Self {
            log_data: data.iter().map(|x| x.ln()).collect(),
            sampler,
        })
    }

    pub fn from_dataset(dataset: &Dataset, sampler: SamplerConfig) -> Result<Self, ProviderError> {
        if dataset.dim() != 1 {
            return Err(ProviderError::DimensionMismatch {
                expected: 1,
                got: dataset.dim(),
            });
        }
        let data: Vec<f64> = dataset.rows().map(|r| r[0]).collect();
        Self::new(&data, sampler)
    }

    pub fn sampler(&self) -> &SamplerConfig {
        &self.sampler
    }

    pub fn stats(&self, subset: &[usize]) -> LogStats {
        let n = subset.len();
        let mean = subset.iter().map(|&i| self.log_data[i]).sum::<f64>() / n as f64;
        let ss = subset.iter().map(|&i| (self.log_data[i] - mean).powi(2)).sum();
        LogStats { n, mean, ss }
    }

    /// True when the subset carries no information about σ (all observations equal).
    pub fn low_identifiability(&self, subset: &[usize]) -> bool {
        let s = self.stats(subset);
        s.ss <= 1e-24 * s.n as f64 * (1.0 + s.mean * s.mean)
    }

    /// Unnormalized log posterior at (μ, log σ).
    pub fn log_posterior(stats: &LogStats, mu: f64, log_sigma: f64) -> f64 {
        if mu.abs() > MU_BOUND || log_sigma < LOG_SIGMA_BOUNDS.0 || log_sigma > LOG_SIGMA_BOUNDS.1 {
            return f64::NEG_INFINITY;
        }
        let n = stats.n as f64;
        let d = stats.mean - mu;
        -n * log_sigma - (stats.ss + n * d * d) * 0.5 * (-2.0 * log_sigma).exp()
    }

    pub fn sigma_expectation(&self, subset: &[usize], seed: u64) -> Result<f64, ProviderError> {
        check_subset(subset, self.log_data.len())?;
        if subset.len() < 2 {
            return Err(ProviderError::SubsetTooSmall {
                needed: 2,
                got: subset.len(),
            });
        }
        let stats = self.stats(subset);
        let n = stats.n as f64;
        let lo = LOG_SIGMA_BOUNDS.0;
        let s0 = if self.low_identifiability(subset) {
            lo + 1.0 / n
        } else {
            (0.5 * (stats.ss / n).ln()).max(lo + 1.0 / n)
        };
        let mu_scale = s0.exp() / n.sqrt();
        let s_scale = 1.0 / (2.0 * n).sqrt();
        let chain = adaptive_rwm(
            |z: &[f64]| Self::log_posterior(&stats, stats.mean + mu_scale * z[0], s0 + s_scale * z[1]),
            &[0.0, 0.0],
            &self.sampler,
            seed,
        )?;
        Ok(chain.samples().map(|z| (s0 + s_scale * z[1]).exp()).sum::<f64>() / chain.len() as f64)
    }
}

impl ExpectationProvider for LogGaussianModel {
    fn dataset_size(&self) -> usize {
        self.log_data.len()
    }

    fn functional_name(&self) -> String {
        "posterior mean of sigma".into()
    }

    fn evaluate(&self, subset: &[usize], sub_seed: u64) -> Result<Vec<f64>, ProviderError> {
        Ok(vec![self.sigma_expectation(subset, sub_seed)?])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DatasetKind, SyntheticSpec};

    fn model(n: usize, seed: u64) -> LogGaussianModel {
        let d = SyntheticSpec::new(DatasetKind::LogGaussian, n, seed).generate().unwrap();
        LogGaussianModel::from_dataset(&d, SamplerConfig::default()).unwrap()
    }

    #[test]
    fn large_subset_recovers_sigma() {
        let m = model(1 << 14, 2);
        let subset: Vec<usize> = (0..1 << 14).collect();
        let est = m.sigma_expectation(&subset, 5).unwrap();
        assert!((est - 2f64.sqrt()).abs() < 0.05, "{est}");
    }

    #[test]
    fn too_small_subset() {
        let m = model(10, 1);
        assert!(matches!(
            m.evaluate(&[3], 0),
            Err(ProviderError::SubsetTooSmall { needed: 2, got: 1 })
        ));
        assert!(matches!(m.evaluate(&[0, 10], 0), Err(ProviderError::IndexOutOfRange { .. })));
    }

    #[test]
    fn identical_observations_give_small_sigma() {
        let m = LogGaussianModel::new(&[2.5; 6], SamplerConfig::default()).unwrap();
        let subset: Vec<usize> = (0..6).collect();
        assert!(m.low_identifiability(&subset));
        let est = m.sigma_expectation(&subset, 1).unwrap();
        assert!(est > 0.0 && est < 1e-6, "{est}");
    }

    #[test]
    fn small_batches_have_finite_mean() {
        let m = model(1 << 10, 3);
        let ests: Vec<f64> = (0..150)
            .map(|r| {
                let subset: Vec<usize> = (r * 8..r * 8 + 8).map(|i| i % 1024).collect();
                m.sigma_expectation(&subset, r as u64).unwrap()
            })
            .collect();
        assert!(ests.iter().all(|e| e.is_finite() && *e > 0.0));
        let mean = ests.iter().sum::<f64>() / 150.0;
        assert!(mean > 0.5 && mean < 5.0, "{mean}");
    }

    #[test]
    fn rejects_non_positive_data() {
        assert!(LogGaussianModel::new(&[1.0, 0.0], SamplerConfig::default()).is_err());
        assert!(LogGaussianModel::new(&[1.0, -2.0], SamplerConfig::default()).is_err());
    }

    #[test]
    fn deterministic_in_seed() {
        let m = model(64, 4);
        let s: Vec<usize> = (0..32).collect();
        assert_eq!(m.evaluate(&s, 9).unwrap(), m.evaluate(&s, 9).unwrap());
        assert_ne!(m.evaluate(&s, 9).unwrap(), m.evaluate(&s, 10).unwrap());
    }
}
