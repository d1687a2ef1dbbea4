//! Random Fourier feature regression: Bayesian linear regression on
//! φ(x) = (cos(w_i·x + b_i))_i / √m.
//!
//! With w_i ~ N(0, s² I) and b_i ~ U[0, 2π), E[φ(x)ᵀφ(x')] = ½·exp(−s²‖x−x'‖²/2),
//! so the default s = √2 gives a kernel proportional to exp(−‖x−x'‖²).

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{check_subset, Dataset, DatasetKind, ExpectationProvider, ProviderError};

pub const DEFAULT_SPECTRAL_STD: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone, PartialEq)]
pub struct RffBasis {
    /// m × d frequencies, row-major.
    frequencies: Vec<f64>,
    phases: Vec<f64>,
    input_dim: usize,
}

impl RffBasis {
    pub fn sample<R: Rng + ?Sized>(m: usize, input_dim: usize, spectral_std: f64, rng: &mut R) -> Self {
        let frequencies = (0..m * input_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                spectral_std * z
            })
            .collect();
        let phases = (0..m).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        Self {
            frequencies,
            phases,
            input_dim,
        }
    }

    pub fn from_parts(frequencies: Vec<f64>, phases: Vec<f64>, input_dim: usize) -> Result<Self, ProviderError> {
        if frequencies.len() != phases.len() * input_dim {
            return Err(ProviderError::DimensionMismatch {
                expected: phases.len() * input_dim,
                got: frequencies.len(),
            });
        }
        Ok(Self {
            frequencies,
            phases,
            input_dim,
        })
    }

    pub fn features_len(&self) -> usize {
        self.phases.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn try_features(&self, x: &[f64]) -> Result<Vec<f64>, ProviderError> {
        if x.len() != self.input_dim {
            return Err(ProviderError::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(self.features(x))
    }

    /// Panics if `x` has the wrong dimension.
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_dim, "covariate dimension");
        let norm = 1.0 / (self.features_len() as f64).sqrt();
        self.frequencies
            .chunks_exact(self.input_dim.max(1))
            .zip(&self.phases)
            .map(|(w, b)| norm * (w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b).cos())
            .collect()
    }

    /// Feature matrix with one row per point of the row-major `points`.
    pub fn feature_matrix(&self, points: &[f64]) -> DMatrix<f64> {
        let n = points.len() / self.input_dim;
        let m = self.features_len();
        let mut out = DMatrix::zeros(n, m);
        for (i, x) in points.chunks_exact(self.input_dim).enumerate() {
            for (j, v) in self.features(x).into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        out
    }
}

/// Predictive mean at a fixed set of test points.
#[derive(Debug, Clone)]
pub struct RffRegressionModel {
    basis: RffBasis,
    lambda: f64,
    /// n × m training features.
    features: DMatrix<f64>,
    targets: Vec<f64>,
    /// k × m test features.
    test_features: DMatrix<f64>,
}

impl RffRegressionModel {
    /// `train_x` and `test_x` are row-major with `basis.input_dim()` columns.
    pub fn new(
        basis: RffBasis,
        lambda: f64,
        train_x: &[f64],
        train_y: &[f64],
        test_x: &[f64],
    ) -> Result<Self, ProviderError> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(ProviderError::InvalidModel(format!("noise variance must be positive, got {lambda}")));
        }
        let d = basis.input_dim();
        if d == 0 || train_x.len() != train_y.len() * d {
            return Err(ProviderError::DimensionMismatch {
                expected: train_y.len() * d,
                got: train_x.len(),
            });
        }
        if test_x.is_empty() || test_x.len() % d != 0 {
            return Err(ProviderError::DimensionMismatch {
                expected: d,
                got: test_x.len(),
            });
        }
        Ok(Self {
            features: basis.feature_matrix(train_x),
            test_features: basis.feature_matrix(test_x),
            targets: train_y.to_vec(),
            basis,
            lambda,
        })
    }

    pub fn from_dataset(dataset: &Dataset, basis: RffBasis, lambda: f64, test_x: &[f64]) -> Result<Self, ProviderError> {
        if dataset.kind() != DatasetKind::RffRegression {
            return Err(ProviderError::InvalidModel(format!(
                "expected an rff_regression dataset, got {}",
                dataset.kind()
            )));
        }
        let d = dataset.dim();
        let mut x = Vec::with_capacity(dataset.len() * d);
        let mut y = Vec::with_capacity(dataset.len());
        for row in dataset.rows() {
            x.extend_from_slice(&row[..d]);
            y.push(row[d]);
        }
        Self::new(basis, lambda, &x, &y, test_x)
    }

    pub fn basis(&self) -> &RffBasis {
        &self.basis
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn test_points(&self) -> usize {
        self.test_features.nrows()
    }

    /// φ_*ᵀ(ΦᵀΦ + λI)⁻¹Φᵀy over the subset, by Cholesky of the m × m system.
    pub fn predictive_mean(&self, subset: &[usize]) -> Result<Vec<f64>, ProviderError> {
        check_subset(subset, self.len())?;
        if subset.is_empty() {
            return Err(ProviderError::SubsetTooSmall { needed: 1, got: 0 });
        }
        let m = self.basis.features_len();
        let mut gram = DMatrix::<f64>::identity(m, m) * self.lambda;
        let mut rhs = DVector::<f64>::zeros(m);
        for &i in subset {
            let row = self.features.row(i);
            let y = self.targets[i];
            for a in 0..m {
                let ra = row[a];
                rhs[a] += ra * y;
                for b in 0..=a {
                    gram[(a, b)] += ra * row[b];
                }
            }
        }
        gram.fill_upper_triangle_with_lower_triangle();
        let weights = gram
            .cholesky()
            .ok_or(ProviderError::FactorizationFailure)?
            .solve(&rhs);
        Ok((&self.test_features * weights).as_slice().to_vec())
    }

    /// k_*ᵀ(K + λI)⁻¹y with K = ΦΦᵀ; O(n³), for cross-checking small subsets.
    pub fn dual_predictive_mean(&self, subset: &[usize]) -> Result<Vec<f64>, ProviderError> {
        check_subset(subset, self.len())?;
        let m = self.basis.features_len();
        let phi = DMatrix::from_fn(subset.len(), m, |i, j| self.features[(subset[i], j)]);
        let y = DVector::from_iterator(subset.len(), subset.iter().map(|&i| self.targets[i]));
        let k = &phi * phi.transpose() + DMatrix::identity(subset.len(), subset.len()) * self.lambda;
        let alpha = k.cholesky().ok_or(ProviderError::FactorizationFailure)?.solve(&y);
        let k_star = &self.test_features * phi.transpose();
        Ok((k_star * alpha).as_slice().to_vec())
    }
}

impl ExpectationProvider for RffRegressionModel {
    fn dataset_size(&self) -> usize {
        self.len()
    }

    fn functional_name(&self) -> String {
        format!("predictive mean at {} test points", self.test_points())
    }

    fn output_dim(&self) -> usize {
        self.test_points()
    }

    fn evaluate(&self, subset: &[usize], _sub_seed: u64) -> Result<Vec<f64>, ProviderError> {
        self.predictive_mean(subset)
    }
}

/// Mean squared difference between two prediction vectors.
pub fn mse(predictions: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(predictions.len(), truth.len());
    predictions.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / truth.len() as f64
}
