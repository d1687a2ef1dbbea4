//! Turns a config into datasets, schedules, providers and a truncation law.

use std::path::Path;

use debias_core::estimator::random_prefix;
use debias_core::models::rff::{mse, RffRegressionModel};
use debias_core::models::{
    Dataset, DatasetKind, ExpectationProvider, GaussianMeanModel, LogGaussianModel, LogisticRegressionModel,
    ProviderError, RffBasis,
};
use debias_core::schedule::{tune_alpha, AlphaTuning};
use debias_core::seed::{derive, rng_from, stream};
use debias_core::{BatchSchedule, ConvergenceFit, CostModel, TruncationDistribution};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AlphaSetting, ExperimentConfig, PilotReference};
use crate::error::CliError;

/// Stream tags for randomness owned by the command layer.
pub mod tags {
    pub const RFF_BASIS: u64 = 0x4241_5349;
    pub const TEST_POINTS: u64 = 0x5445_5354;
    pub const CONVERGENCE: u64 = 0x434F_4E56;
    pub const FULL_REFERENCE: u64 = 0x4655_4C4C;
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    let path = cfg
        .data
        .as_deref()
        .ok_or_else(|| CliError::Config("'data' (dataset path) is required".into()))?;
    let dataset = read_dataset(path)?;
    if let Some(kind) = cfg.model {
        if kind != dataset.kind() {
            return Err(CliError::Config(format!(
                "model '{kind}' does not match dataset kind '{}'",
                dataset.kind()
            )));
        }
    }
    Ok(dataset)
}

pub fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    if !path.exists() {
        return Err(CliError::Config(format!("dataset {} does not exist", path.display())));
    }
    Ok(Dataset::read_path(path)?)
}

/// The schedule over the largest admissible `N' ≤ N`, and the requested `N`
/// when it had to be reduced.
pub fn resolve_schedule(cfg: &ExperimentConfig, available: usize) -> Result<(BatchSchedule, Option<usize>), CliError> {
    let requested = cfg.total.unwrap_or(available);
    if requested > available {
        return Err(CliError::Config(format!(
            "total={requested} exceeds the {available} available observations"
        )));
    }
    let admissible = BatchSchedule::largest_admissible(cfg.min_batch, cfg.ratio, requested).ok_or_else(|| {
        CliError::Config(format!(
            "no schedule a·ratio^k ≤ {requested} with a={} and ratio={}",
            cfg.min_batch, cfg.ratio
        ))
    })?;
    let schedule = BatchSchedule::geometric(cfg.min_batch, cfg.ratio, admissible)?;
    Ok((schedule, (admissible != requested).then_some(requested)))
}

pub fn is_mcmc(kind: DatasetKind) -> bool {
    matches!(kind, DatasetKind::LogGaussian | DatasetKind::Logistic)
}

/// `M` is the chain length for sampled models and 1 for closed forms.
pub fn cost_model(cfg: &ExperimentConfig, kind: Option<DatasetKind>) -> CostModel {
    match kind {
        Some(k) if is_mcmc(k) => CostModel::new(cfg.sampler.chain_length()).expect("validated"),
        _ => CostModel::default(),
    }
}

/// Square matrix from 1 (scaled identity), `dim` (diagonal) or `dim²` (row-major) entries.
pub fn square_matrix(key: &str, values: &[f64], dim: usize) -> Result<DMatrix<f64>, CliError> {
    match values.len() {
        1 => Ok(DMatrix::identity(dim, dim) * values[0]),
        n if n == dim => Ok(DMatrix::from_diagonal(&DVector::from_column_slice(values))),
        n if n == dim * dim => Ok(DMatrix::from_row_slice(dim, dim, values)),
        n => Err(CliError::Config(format!("{key}: need 1, {dim} or {} entries, got {n}", dim * dim))),
    }
}

fn header_list(dataset: &Dataset, key: &str) -> Result<Option<Vec<f64>>, CliError> {
    dataset
        .param(key)
        .map(|s| {
            s.split(';')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::Config(format!("dataset header {key}: {e}")))
        })
        .transpose()
}

fn header_f64(dataset: &Dataset, key: &str, default: f64) -> Result<f64, CliError> {
    Ok(header_list(dataset, key)?.and_then(|v| v.first().copied()).unwrap_or(default))
}

pub fn gaussian_model(
    cfg: &ExperimentConfig,
    data: Vec<f64>,
    dim: usize,
    default_cov: Option<&[f64]>,
) -> Result<GaussianMeanModel, CliError> {
    let cov = match (&cfg.likelihood_cov, default_cov) {
        (Some(v), _) => square_matrix("likelihood_cov", v, dim)?,
        (None, Some(v)) => square_matrix("cov", v, dim)?,
        (None, None) => DMatrix::identity(dim, dim),
    };
    let prior_mean = match &cfg.prior_mean {
        None => DVector::zeros(dim),
        Some(v) if v.len() == 1 => DVector::from_element(dim, v[0]),
        Some(v) if v.len() == dim => DVector::from_column_slice(v),
        Some(v) => return Err(CliError::Config(format!("prior_mean: need 1 or {dim} entries, got {}", v.len()))),
    };
    let prior_cov = match &cfg.prior_cov {
        None => DMatrix::identity(dim, dim),
        Some(v) => square_matrix("prior_cov", v, dim)?,
    };
    let model = GaussianMeanModel::new(data, dim, cov)
        .map_err(|e| match e {
            ProviderError::SingularCovariance => {
                CliError::Config("likelihood covariance is not symmetric positive definite".into())
            }
            e => e.into(),
        })?
        .with_prior(prior_mean, prior_cov)
        .map_err(|e| CliError::Config(format!("prior: {e}")))?;
    Ok(model.with_component(cfg.component)?)
}

/// A provider bound to a dataset.
pub enum Model {
    Gaussian(GaussianMeanModel),
    LogGaussian(LogGaussianModel),
    Logistic(LogisticRegressionModel),
    Rff(RffRegressionModel),
}

impl Model {
    pub fn provider(&self) -> &dyn ExpectationProvider {
        match self {
            Model::Gaussian(m) => m,
            Model::LogGaussian(m) => m,
            Model::Logistic(m) => m,
            Model::Rff(m) => m,
        }
    }

    /// Ground truth for a full-data functional, where one is defined: the
    /// closed-form posterior mean, or the full-data predictive mean.
    pub fn full_data_value(&self) -> Result<Option<Vec<f64>>, CliError> {
        Ok(match self {
            Model::Gaussian(m) => Some(m.full_posterior_mean()?.as_slice().to_vec()),
            Model::Rff(m) => {
                let all: Vec<usize> = (0..m.len()).collect();
                Some(m.predictive_mean(&all)?)
            }
            _ => None,
        })
    }

    /// Mean squared error of predictions against the full-data predictive mean.
    pub fn prediction_mse(&self, predictions: &[f64]) -> Result<Option<f64>, CliError> {
        Ok(match (self, self.full_data_value()?) {
            (Model::Rff(_), Some(truth)) => Some(mse(predictions, &truth)),
            _ => None,
        })
    }
}

/// Builds the provider for `dataset` (already cut to the schedule's `N`).
pub fn build_model(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<Model, CliError> {
    let dim = dataset.dim();
    Ok(match dataset.kind() {
        DatasetKind::GaussianMean => {
            let data = dataset.rows().flat_map(|r| r.iter().copied()).collect();
            Model::Gaussian(gaussian_model(cfg, data, dim, header_list(dataset, "cov")?.as_deref())?)
        }
        DatasetKind::LogGaussian => Model::LogGaussian(LogGaussianModel::from_dataset(dataset, cfg.sampler)?),
        DatasetKind::Logistic => Model::Logistic(
            LogisticRegressionModel::from_dataset(dataset, cfg.sampler)?.with_weight_index(cfg.component)?,
        ),
        DatasetKind::RffRegression => {
            let m = match cfg.rff_features {
                Some(m) => m,
                None => header_f64(dataset, "m", 100.0)? as usize,
            };
            let spectral_std = match cfg.spectral_std {
                Some(s) => s,
                None => header_f64(dataset, "spectral_std", std::f64::consts::SQRT_2)?,
            };
            let (lo, hi) = (header_f64(dataset, "x_min", 0.0)?, header_f64(dataset, "x_max", 10.0)?);
            // the fitted basis is drawn afresh, independent of the one that generated the labels
            let basis = RffBasis::sample(m, dim, spectral_std, &mut rng_from(derive(cfg.seed, tags::RFF_BASIS, 0)));
            let mut rng = rng_from(derive(cfg.seed, tags::TEST_POINTS, 0));
            let test: Vec<f64> = (0..cfg.test_points * dim).map(|_| rng.random_range(lo..hi)).collect();
            Model::Rff(RffRegressionModel::from_dataset(dataset, basis, cfg.lambda, &test)?)
        }
    })
}

/// Where the decay fit used for tuning came from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BetaSource {
    pub origin: String,
    pub fitted_beta: f64,
    pub margin: f64,
    pub c: f64,
}

/// Pilot squared differences and their fit.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PilotFit {
    pub fit: ConvergenceFit,
    pub sizes: Vec<usize>,
    pub squared_diffs: Vec<f64>,
    pub reference: String,
    pub repeats: usize,
}

/// Repeated partial expectations on nested prefixes of the first
/// `pilot_levels` levels, compared with the largest pilot level or the full data.
pub fn run_pilot(
    cfg: &ExperimentConfig,
    provider: &dyn ExpectationProvider,
    schedule: &BatchSchedule,
) -> Result<PilotFit, CliError> {
    if cfg.pilot_levels < 3 {
        return Err(CliError::Config(format!(
            "pilot_levels={} is too small: fitting the decay needs at least 3 levels",
            cfg.pilot_levels
        )));
    }
    let k = cfg.pilot_levels.min(schedule.levels());
    let sizes = &schedule.sizes()[..k];
    let primary = provider.primary_component();
    let n = schedule.total();
    let full = match cfg.pilot_reference {
        PilotReference::Full => {
            let all: Vec<usize> = (0..n).collect();
            Some(provider.evaluate(&all, derive(cfg.seed, tags::FULL_REFERENCE, 0))?[primary])
        }
        PilotReference::LargestLevel => None,
    };
    let paths = (0..cfg.pilot_repeats)
        .into_par_iter()
        .map(|j| {
            let seed = derive(cfg.seed, stream::PILOT, j as u64);
            let order = random_prefix(n, sizes[k - 1], &mut rng_from(seed));
            sizes
                .iter()
                .enumerate()
                .map(|(t, &size)| {
                    provider
                        .evaluate(&order[..size], derive(seed, stream::LEVEL, t as u64 + 1))
                        .map(|v| v[primary])
                })
                .collect::<Result<Vec<f64>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let compared = if full.is_some() { k } else { k - 1 };
    let squared_diffs: Vec<f64> = (0..compared)
        .map(|t| {
            paths
                .iter()
                .map(|p| (p[t] - full.unwrap_or(p[k - 1])).powi(2))
                .sum::<f64>()
                / paths.len() as f64
        })
        .collect();
    let xs: Vec<f64> = sizes[..compared].iter().map(|&s| s as f64).collect();
    let fit = debias_core::schedule::fit_beta(&xs, &squared_diffs)?;
    Ok(PilotFit {
        fit,
        sizes: sizes[..compared].to_vec(),
        squared_diffs,
        reference: match cfg.pilot_reference {
            PilotReference::Full => "full".into(),
            PilotReference::LargestLevel => format!("largest level (n={})", sizes[k - 1]),
        },
        repeats: cfg.pilot_repeats,
    })
}

pub fn read_fit_file(path: &Path) -> Result<ConvergenceFit, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(format!("reading {}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let fit = value.get("fit").unwrap_or(&value);
    Ok(serde_json::from_value(fit.clone())?)
}

/// The decay fit from `beta`, `beta_fit`, or (when `provider` is given) an inline pilot.
pub fn resolve_fit(
    cfg: &ExperimentConfig,
    provider: Option<(&dyn ExpectationProvider, &BatchSchedule)>,
) -> Result<(ConvergenceFit, String), CliError> {
    if let Some(beta) = cfg.beta {
        return Ok((
            ConvergenceFit {
                c: 1.0,
                beta,
                residual: 0.0,
            },
            "config".into(),
        ));
    }
    if let Some(path) = &cfg.beta_fit {
        return Ok((read_fit_file(path)?, format!("file {}", path.display())));
    }
    match provider {
        Some((p, s)) => Ok((run_pilot(cfg, p, s)?.fit, "inline pilot".into())),
        None => Err(CliError::Config(
            "alpha=auto needs a decay exponent: set 'beta', 'beta_fit' or provide data for a pilot".into(),
        )),
    }
}

/// Tunes `α` for the fitted decay reduced by the safety margin.
pub fn tune_with_margin(
    cfg: &ExperimentConfig,
    schedule: &BatchSchedule,
    fit: &ConvergenceFit,
    cost: &CostModel,
) -> Result<(AlphaTuning, ConvergenceFit), CliError> {
    let used = ConvergenceFit {
        beta: fit.beta - cfg.beta_margin,
        ..*fit
    };
    Ok((tune_alpha(schedule, &used, cost)?, used))
}

/// The truncation law for the run and, for `alpha=auto`, how it was chosen.
pub fn resolve_alpha(
    cfg: &ExperimentConfig,
    schedule: &BatchSchedule,
    cost: &CostModel,
    provider: Option<&dyn ExpectationProvider>,
) -> Result<(TruncationDistribution, Option<BetaSource>), CliError> {
    let (alpha, source) = match cfg.alpha {
        AlphaSetting::Fixed(a) => (a, None),
        AlphaSetting::Auto => {
            let (fit, origin) = resolve_fit(cfg, provider.map(|p| (p, schedule)))?;
            let (tuning, _) = tune_with_margin(cfg, schedule, &fit, cost)?;
            (
                tuning.alpha,
                Some(BetaSource {
                    origin,
                    fitted_beta: fit.beta,
                    margin: cfg.beta_margin,
                    c: fit.c,
                }),
            )
        }
    };
    Ok((TruncationDistribution::geometric(alpha, schedule.levels())?, source))
}
