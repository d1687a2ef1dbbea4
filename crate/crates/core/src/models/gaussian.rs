//! Conjugate Gaussian model with unknown mean and known covariance.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{check_subset, Dataset, ExpectationProvider, ProviderError};
use crate::sampler::{adaptive_rwm, SamplerConfig};
use crate::stats::batch_means_mcse;

/// x_i ~ N(μ, Σ), μ ~ N(m0, S0). Reports the posterior mean of μ.
#[derive(Debug, Clone)]
pub struct GaussianMeanModel {
    dim: usize,
    data: Vec<f64>,
    precision: DMatrix<f64>,
    prior_mean: DVector<f64>,
    prior_precision: DMatrix<f64>,
    prior_shift: DVector<f64>,
    component: usize,
}

fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>, ProviderError> {
    if !m.is_square() || (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(ProviderError::SingularCovariance);
    }
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(ProviderError::SingularCovariance)
}

impl GaussianMeanModel {
    /// Row-major `data` of `dim` columns; prior N(0, I).
    pub fn new(data: Vec<f64>, dim: usize, likelihood_cov: DMatrix<f64>) -> Result<Self, ProviderError> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(ProviderError::DimensionMismatch {
                expected: dim,
                got: data.len(),
            });
        }
        if likelihood_cov.nrows() != dim {
            return Err(ProviderError::DimensionMismatch {
                expected: dim,
                got: likelihood_cov.nrows(),
            });
        }
        let precision = spd_inverse(&likelihood_cov)?;
        Ok(Self {
            dim,
            data,
            precision,
            prior_mean: DVector::zeros(dim),
            prior_precision: DMatrix::identity(dim, dim),
            prior_shift: DVector::zeros(dim),
            component: 0,
        })
    }

    pub fn from_dataset(dataset: &Dataset, likelihood_cov: DMatrix<f64>) -> Result<Self, ProviderError> {
        let dim = dataset.dim();
        let data = dataset.rows().flat_map(|r| r[..dim].iter().copied()).collect();
        Self::new(data, dim, likelihood_cov)
    }

    pub fn with_prior(mut self, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, ProviderError> {
        if mean.len() != self.dim || cov.nrows() != self.dim {
            return Err(ProviderError::DimensionMismatch {
                expected: self.dim,
                got: mean.len().max(cov.nrows()),
            });
        }
        self.prior_precision = spd_inverse(&cov)?;
        self.prior_shift = &self.prior_precision * &mean;
        self.prior_mean = mean;
        Ok(self)
    }

    pub fn with_component(mut self, component: usize) -> Result<Self, ProviderError> {
        if component >= self.dim {
            return Err(ProviderError::DimensionMismatch {
                expected: self.dim,
                got: component + 1,
            });
        }
        self.component = component;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn observation(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset_sum(&self, subset: &[usize]) -> DVector<f64> {
        let mut sum = DVector::zeros(self.dim);
        for &i in subset {
            for (s, x) in sum.iter_mut().zip(self.observation(i)) {
                *s += x;
            }
        }
        sum
    }

    /// Posterior mean and covariance given `n` observations summing to `sum`.
    /// `n = 0` gives the prior.
    pub fn posterior_from_sum(&self, n: usize, sum: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>), ProviderError> {
        let post_precision = &self.precision * n as f64 + &self.prior_precision;
        let cov = post_precision
            .cholesky()
            .ok_or(ProviderError::SingularCovariance)?
            .inverse();
        let mean = &cov * (&self.precision * sum + &self.prior_shift);
        Ok((mean, cov))
    }

    pub fn posterior(&self, subset: &[usize]) -> Result<(DVector<f64>, DMatrix<f64>), ProviderError> {
        check_subset(subset, self.len())?;
        self.posterior_from_sum(subset.len(), &self.subset_sum(subset))
    }

    /// Posterior mean on the whole dataset.
    pub fn full_posterior_mean(&self) -> Result<DVector<f64>, ProviderError> {
        let all: Vec<usize> = (0..self.len()).collect();
        Ok(self.posterior(&all)?.0)
    }

    /// Posterior mean of μ estimated by random-walk Metropolis, with per-component
    /// batch-means standard errors. Cross-check for the closed form.
    pub fn sampled_posterior_mean(
        &self,
        subset: &[usize],
        config: &SamplerConfig,
        seed: u64,
    ) -> Result<(Vec<f64>, Vec<f64>), ProviderError> {
        let (mean, cov) = self.posterior(subset)?;
        let n = subset.len() as f64;
        let sum = self.subset_sum(subset);
        let lik_shift = &self.precision * &sum;
        let log_target = |mu: &[f64]| {
            let mu = DVector::from_column_slice(mu);
            let d = &mu - &self.prior_mean;
            -0.5 * n * mu.dot(&(&self.precision * &mu)) + mu.dot(&lik_shift)
                - 0.5 * d.dot(&(&self.prior_precision * &d))
        };
        let scale = (cov.trace() / self.dim as f64).sqrt();
        let chain = adaptive_rwm(log_target, mean.as_slice(), &config.with_step(config.initial_step * scale), seed)?;
        let means = (0..self.dim)
            .map(|j| chain.coordinate(j).iter().sum::<f64>() / chain.len() as f64)
            .collect();
        let mcse = (0..self.dim)
            .map(|j| batch_means_mcse(&chain.coordinate(j)).unwrap_or(f64::INFINITY))
            .collect();
        Ok((means, mcse))
    }
}

impl ExpectationProvider for GaussianMeanModel {
    fn dataset_size(&self) -> usize {
        self.len()
    }

    fn functional_name(&self) -> String {
        format!("posterior mean of mu[{}]", self.component)
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn primary_component(&self) -> usize {
        self.component
    }

    fn evaluate(&self, subset: &[usize], _sub_seed: u64) -> Result<Vec<f64>, ProviderError> {
        if subset.is_empty() {
            return Err(ProviderError::SubsetTooSmall { needed: 1, got: 0 });
        }
        Ok(self.posterior(subset)?.0.as_slice().to_vec())
    }
}

/// Nearest symmetric positive-definite matrix in Frobenius norm, with
/// eigenvalues floored at `rel_floor · max|λ|`. Returns the matrix and the
/// Frobenius distance from the input.
pub fn nearest_spd(m: &DMatrix<f64>, rel_floor: f64) -> (DMatrix<f64>, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.amax();
    let floor = (rel_floor * scale).max(f64::MIN_POSITIVE);
    let clipped = eig.eigenvalues.map(|l| l.max(floor));
    let q = &eig.eigenvectors;
    let spd = q * DMatrix::from_diagonal(&clipped) * q.transpose();
    let spd = (&spd + spd.transpose()) * 0.5;
    let deviation = (&spd - m).norm();
    (spd, deviation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DatasetKind, SyntheticSpec};

    fn model(data: Vec<f64>, dim: usize) -> GaussianMeanModel {
        GaussianMeanModel::new(data, dim, DMatrix::identity(dim, dim)).unwrap()
    }

    #[test]
    fn single_observation_halves() {
        let m = model(vec![3.0, -1.0], 2);
        let out = m.evaluate(&[0], 0).unwrap();
        assert!((out[0] - 1.5).abs() < 1e-14);
        assert!((out[1] + 0.5).abs() < 1e-14);
    }

    #[test]
    fn empty_subset_is_prior() {
        let m = model(vec![3.0, -1.0], 2);
        let (mean, cov) = m.posterior(&[]).unwrap();
        assert_eq!(mean.as_slice(), &[0.0, 0.0]);
        assert_eq!(cov, DMatrix::identity(2, 2));
        assert!(m.evaluate(&[], 0).is_err());
    }

    #[test]
    fn closed_form_matches_scalar_formula() {
        // scalar: mean = (Σx/σ² + m0/s0²) / (n/σ² + 1/s0²)
        let xs = vec![1.0, 4.0, -2.0, 7.5];
        let m = GaussianMeanModel::new(xs.clone(), 1, DMatrix::from_element(1, 1, 4.0))
            .unwrap()
            .with_prior(DVector::from_element(1, 2.0), DMatrix::from_element(1, 1, 9.0))
            .unwrap();
        let expect = (xs.iter().sum::<f64>() / 4.0 + 2.0 / 9.0) / (4.0 / 4.0 + 1.0 / 9.0);
        let got = m.evaluate(&[0, 1, 2, 3], 0).unwrap()[0];
        assert!((got - expect).abs() < 1e-12, "{got} {expect}");
    }

    #[test]
    fn full_data_recovers_true_mean() {
        let d = SyntheticSpec::new(DatasetKind::GaussianMean, 20_000, 5).generate().unwrap();
        let m = GaussianMeanModel::from_dataset(&d, DMatrix::identity(2, 2)).unwrap();
        let mean = m.full_posterior_mean().unwrap();
        for v in mean.iter() {
            assert!((v - 2.0).abs() < 0.04, "{v}");
        }
    }

    #[test]
    fn sampler_agrees_with_closed_form() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]);
        let d = SyntheticSpec::new(DatasetKind::GaussianMean, 400, 8)
            .with_param("cov", "1;0.5;0.5;2")
            .generate()
            .unwrap();
        let m = GaussianMeanModel::from_dataset(&d, cov).unwrap();
        let cfg = SamplerConfig {
            iterations: 40_000,
            burn_in: 1_000,
            ..Default::default()
        };
        for (k, n) in [4usize, 20, 100, 400].into_iter().enumerate() {
            let subset: Vec<usize> = (0..n).collect();
            let exact = m.evaluate(&subset, 0).unwrap();
            let (est, mcse) = m.sampled_posterior_mean(&subset, &cfg, k as u64).unwrap();
            for j in 0..2 {
                assert!((est[j] - exact[j]).abs() < 4.0 * mcse[j], "n={n} j={j}: {} vs {} (mcse {})", est[j], exact[j], mcse[j]);
            }
        }
    }

    #[test]
    fn rejects_non_spd_covariance() {
        let bad = DMatrix::from_row_slice(2, 2, &[-1.0, 3.0, 3.0, 1.0]);
        assert!(matches!(
            GaussianMeanModel::new(vec![0.0, 0.0], 2, bad),
            Err(ProviderError::SingularCovariance)
        ));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0]);
        assert!(GaussianMeanModel::new(vec![0.0, 0.0], 2, asym).is_err());
    }

    #[test]
    fn nearest_spd_repairs_indefinite_matrix() {
        let bad = DMatrix::from_row_slice(2, 2, &[-1.0, 3.0, 3.0, 1.0]);
        let (fixed, dev) = nearest_spd(&bad, 1e-3);
        assert!(fixed.clone().cholesky().is_some());
        // eigenvalues ±√10: the negative one moves to the floor
        let expected = (10f64.sqrt() + 1e-3 * 10f64.sqrt()).abs();
        assert!((dev - expected).abs() < 1e-9, "{dev} {expected}");
        let good = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let (same, dev) = nearest_spd(&good, 1e-3);
        assert!(dev < 1e-12);
        assert!((same - good).norm() < 1e-12);
    }
}
