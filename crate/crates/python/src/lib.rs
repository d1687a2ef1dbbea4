//! Python bindings: schedules, truncation laws, tuning, and debiased runs on
//! the conjugate Gaussian mean model.

use std::collections::HashMap;

use debias_core::models::dataset::SyntheticSpec;
use debias_core::models::gaussian::GaussianMeanModel;
use debias_core::schedule::{self, CostModel};
use debias_core::{estimator, seed, BatchSchedule, ConvergenceFit, RunOptions, StopRule, TruncationDistribution};
use nalgebra::DMatrix;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("covariance must be square"));
    }
    Ok(DMatrix::from_row_iterator(n, n, rows.iter().flatten().copied()))
}

/// Geometric ladder of nested subset sizes `a, a·r, …, N`.
#[pyclass(name = "Schedule", frozen)]
struct PySchedule(BatchSchedule);

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (min_batch, total, ratio=2))]
    fn new(min_batch: usize, total: usize, ratio: usize) -> PyResult<Self> {
        BatchSchedule::geometric(min_batch, ratio, total).map(Self).map_err(value_error)
    }

    /// Largest `a·ratio^k` not above `total`, or None.
    #[staticmethod]
    #[pyo3(signature = (min_batch, total, ratio=2))]
    fn largest_admissible(min_batch: usize, total: usize, ratio: usize) -> Option<usize> {
        BatchSchedule::largest_admissible(min_batch, ratio, total)
    }

    #[getter]
    fn sizes(&self) -> Vec<usize> {
        self.0.sizes().to_vec()
    }

    #[getter]
    fn levels(&self) -> usize {
        self.0.levels()
    }

    #[getter]
    fn total(&self) -> usize {
        self.0.total()
    }

    fn __repr__(&self) -> String {
        format!("Schedule(sizes={:?})", self.0.sizes())
    }
}

/// Truncation law `P[T = t] ∝ 2^{-αt}` on `1..=levels`.
#[pyclass(name = "Truncation", frozen)]
struct PyTruncation(TruncationDistribution);

#[pymethods]
impl PyTruncation {
    #[new]
    fn new(alpha: f64, levels: usize) -> PyResult<Self> {
        TruncationDistribution::geometric(alpha, levels).map(Self).map_err(value_error)
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.0.alpha()
    }

    #[getter]
    fn probs(&self) -> Vec<f64> {
        self.0.probs().to_vec()
    }

    #[getter]
    fn tails(&self) -> Vec<f64> {
        self.0.tails().to_vec()
    }

    /// `count` draws of `T` from a seeded stream.
    fn sample(&self, count: usize, seed: u64) -> Vec<usize> {
        let mut rng = seed::rng_from(seed);
        (0..count).map(|_| self.0.sample(&mut rng)).collect()
    }

    fn __repr__(&self) -> String {
        format!("Truncation(alpha={}, levels={})", self.0.alpha(), self.0.levels())
    }
}

#[pyfunction]
#[pyo3(signature = (schedule, truncation, chain_length=1))]
fn expected_evals(schedule: &PySchedule, truncation: &PyTruncation, chain_length: usize) -> PyResult<f64> {
    let cost = CostModel::new(chain_length).map_err(value_error)?;
    schedule::expected_likelihood_evals(&schedule.0, &truncation.0, &cost).map_err(value_error)
}

/// Least-squares fit of `d ≈ c·n^{-β}`; returns a dict with c, beta, residual.
#[pyfunction]
fn fit_beta<'py>(py: Python<'py>, sizes: Vec<f64>, squared_diffs: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let fit = schedule::fit_beta(&sizes, &squared_diffs).map_err(value_error)?;
    let d = PyDict::new(py);
    d.set_item("c", fit.c)?;
    d.set_item("beta", fit.beta)?;
    d.set_item("residual", fit.residual)?;
    Ok(d)
}

/// Exponent minimizing expected cost × variance bound; returns (alpha, product).
#[pyfunction]
#[pyo3(signature = (schedule, beta, c=1.0, chain_length=1))]
fn tune_alpha(schedule: &PySchedule, beta: f64, c: f64, chain_length: usize) -> PyResult<(f64, f64)> {
    let cost = CostModel::new(chain_length).map_err(value_error)?;
    let fit = ConvergenceFit { c, beta, residual: 0.0 };
    let t = schedule::tune_alpha(&schedule.0, &fit, &cost).map_err(value_error)?;
    Ok((t.alpha, t.work_variance))
}

/// Telescoping estimate of a path truncated at `len(values)`.
#[pyfunction]
fn telescoping_estimate(values: Vec<f64>, truncation: &PyTruncation) -> PyResult<f64> {
    estimator::telescoping_estimate(&values, &truncation.0).map_err(value_error)
}

/// Expectation over `T` of the estimate for a full deterministic path.
#[pyfunction]
fn exact_expectation(values: Vec<f64>, truncation: &PyTruncation) -> PyResult<f64> {
    estimator::exact_expectation_oracle(&values, &truncation.0).map_err(value_error)
}

/// Synthetic dataset rows; `params` are generator parameters as strings.
#[pyfunction]
#[pyo3(signature = (kind, n, seed, params=None))]
fn generate(kind: &str, n: usize, seed: u64, params: Option<HashMap<String, String>>) -> PyResult<Vec<Vec<f64>>> {
    let mut spec = SyntheticSpec::new(kind.parse().map_err(value_error)?, n, seed);
    for (k, v) in params.unwrap_or_default() {
        spec = spec.with_param(&k, v);
    }
    let data = spec.generate().map_err(value_error)?;
    Ok(data.rows().map(<[f64]>::to_vec).collect())
}

/// Conjugate Gaussian mean model with known likelihood covariance and an
/// `N(0, I)` prior.
#[pyclass(name = "GaussianMean", frozen)]
struct PyGaussianMean(GaussianMeanModel);

#[pymethods]
impl PyGaussianMean {
    #[new]
    fn new(data: Vec<Vec<f64>>, likelihood_cov: Vec<Vec<f64>>) -> PyResult<Self> {
        let cov = matrix(&likelihood_cov)?;
        let dim = cov.nrows();
        if data.iter().any(|r| r.len() != dim) {
            return Err(PyValueError::new_err("every observation must match the covariance size"));
        }
        GaussianMeanModel::new(data.concat(), dim, cov).map(Self).map_err(value_error)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn posterior_mean(&self, subset: Vec<usize>) -> PyResult<Vec<f64>> {
        if subset.iter().any(|&i| i >= self.0.len()) {
            return Err(PyValueError::new_err("subset index out of range"));
        }
        Ok(self.0.posterior(&subset).map_err(value_error)?.0.as_slice().to_vec())
    }

    fn full_posterior_mean(&self) -> PyResult<Vec<f64>> {
        Ok(self.0.full_posterior_mean().map_err(value_error)?.as_slice().to_vec())
    }

    /// Debiased estimate of the full posterior mean from `replications`
    /// truncated paths. Returns a dict with mean, stderr, component_means,
    /// component_stderrs, replications and total_evals.
    fn debias<'py>(
        &self,
        py: Python<'py>,
        schedule: &PySchedule,
        truncation: &PyTruncation,
        replications: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let options = RunOptions {
            keep_replicates: false,
            ..RunOptions::default()
        };
        let est = py
            .detach(|| {
                estimator::run_debias(
                    &self.0,
                    &schedule.0,
                    &truncation.0,
                    &options,
                    StopRule::Replications(replications),
                    seed,
                )
            })
            .map_err(value_error)?;
        let d = PyDict::new(py);
        d.set_item("mean", est.mean)?;
        d.set_item("stderr", est.stderr)?;
        d.set_item("component_means", est.component_means)?;
        d.set_item("component_stderrs", est.component_stderrs)?;
        d.set_item("replications", est.replications)?;
        d.set_item("total_evals", est.total_likelihood_evals)?;
        Ok(d)
    }
}

#[pymodule]
fn pydebias(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PyTruncation>()?;
    m.add_class::<PyGaussianMean>()?;
    m.add_function(wrap_pyfunction!(expected_evals, m)?)?;
    m.add_function(wrap_pyfunction!(fit_beta, m)?)?;
    m.add_function(wrap_pyfunction!(tune_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(telescoping_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(exact_expectation, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    Ok(())
}
