//! The randomly truncated telescoping estimator and its replication loop.
//!
//! For a path of partial expectations `φ_1, φ_2, …` stopped at a random level
//! `T`, the estimate
//!
//! ```text
//! φ*_T = Σ_{t=1}^{T} (φ_t − φ_{t−1}) / P[T ≥ t],    φ_0 = 0,
//! ```
//!
//! has expectation `φ_L`, the full-data value. Replicates use independent
//! truncation draws and independent random permutations of the data; the
//! subsets along one path are nested prefixes of that permutation.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{ExpectationProvider, ProviderError};
use crate::schedule::{BatchSchedule, CostModel, TruncationDistribution};
use crate::seed::{self, derive, rng_from};
use crate::stats::RunningStats;

/// Minimum number of replicates before a standard-error stopping rule may fire.
pub const MIN_REPLICATES_FOR_TOLERANCE: usize = 10;

/// Replicates are computed in fixed-size chunks; the chunk size is part of the
/// determinism contract for tolerance-based stopping.
const CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("path of length {path} exceeds the truncation support of {support} levels")]
    PathLongerThanSupport { path: usize, support: usize },
    #[error("empty path")]
    EmptyPath,
    #[error("truncation distribution has {dist} levels but the schedule has {schedule}")]
    LengthMismatch { dist: usize, schedule: usize },
    #[error("provider holds {available} observations but the schedule needs {needed}")]
    DatasetTooSmall { needed: usize, available: usize },
    #[error("provider failed at level {level}: {source}")]
    Provider {
        level: usize,
        #[source]
        source: ProviderError,
    },
    #[error("provider returned {got} values at level {level}, expected {expected}")]
    OutputDimension { level: usize, expected: usize, got: usize },
    #[error("level {level} needs {size} observations, above the memory cap of {cap}")]
    LevelExceedsCap { level: usize, size: usize, cap: usize },
    #[error("invalid stop rule: {0}")]
    InvalidStopRule(String),
    #[error("standard error tolerance not reached after {} replicates", .partial.replications)]
    ToleranceUnreachable { partial: Box<DebiasEstimate> },
    #[error("replicate sink failed: {0}")]
    Sink(#[from] std::io::Error),
    #[error("could not build worker pool: {0}")]
    WorkerPool(String),
}

/// Telescoping estimate of a path of partial expectations truncated at
/// `values.len()`.
pub fn telescoping_estimate(values: &[f64], dist: &TruncationDistribution) -> Result<f64, EstimatorError> {
    if values.is_empty() {
        return Err(EstimatorError::EmptyPath);
    }
    if values.len() > dist.levels() {
        return Err(EstimatorError::PathLongerThanSupport {
            path: values.len(),
            support: dist.levels(),
        });
    }
    let mut previous = 0.0;
    let mut estimate = 0.0;
    for (value, tail) in values.iter().zip(dist.tails()) {
        estimate += (value - previous) / tail;
        previous = *value;
    }
    Ok(estimate)
}

fn check_full_path(full: &[f64], dist: &TruncationDistribution) -> Result<(), EstimatorError> {
    if full.len() != dist.levels() {
        return Err(EstimatorError::LengthMismatch {
            dist: dist.levels(),
            schedule: full.len(),
        });
    }
    Ok(())
}

/// `E_T[φ*_T]` by enumeration over every truncation level, for a deterministic
/// path. Equals `φ_L` for every valid truncation law.
pub fn exact_expectation_oracle(full: &[f64], dist: &TruncationDistribution) -> Result<f64, EstimatorError> {
    check_full_path(full, dist)?;
    (1..=full.len())
        .map(|t| telescoping_estimate(&full[..t], dist).map(|e| dist.probs()[t - 1] * e))
        .sum()
}

/// Second moment of `φ*_T` for a deterministic path, two ways.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecondMoment {
    /// `Σ_t (|φ_{t−1} − φ_L|² − |φ_t − φ_L|²) / P[T ≥ t]`.
    pub formula: f64,
    /// `Σ_t P[T = t] (φ*_t)²`.
    pub enumeration: f64,
}

pub fn second_moment_exact(full: &[f64], dist: &TruncationDistribution) -> Result<SecondMoment, EstimatorError> {
    check_full_path(full, dist)?;
    let target = *full.last().expect("non-empty");
    let mut previous = 0.0;
    let mut formula = 0.0;
    for (value, tail) in full.iter().zip(dist.tails()) {
        formula += ((previous - target).powi(2) - (value - target).powi(2)) / tail;
        previous = *value;
    }
    let enumeration = (1..=full.len())
        .map(|t| telescoping_estimate(&full[..t], dist).map(|e| dist.probs()[t - 1] * e * e))
        .sum::<Result<f64, _>>()?;
    Ok(SecondMoment { formula, enumeration })
}

/// First `k` entries of a uniformly random permutation of `0..population`.
///
/// The draw for `k` is a prefix of the draw for any larger `k` under the same
/// RNG state, so nested subsets are prefixes of one permutation.
pub fn random_prefix<R: Rng + ?Sized>(population: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let k = k.min(population);
    if k.saturating_mul(4) >= population {
        let mut perm: Vec<usize> = (0..population).collect();
        for i in 0..k {
            let j = rng.random_range(i..population);
            perm.swap(i, j);
        }
        perm.truncate(k);
        return perm;
    }
    let mut moved: HashMap<usize, usize> = HashMap::with_capacity(2 * k);
    (0..k)
        .map(|i| {
            let j = rng.random_range(i..population);
            let at_j = moved.get(&j).copied().unwrap_or(j);
            let at_i = moved.get(&i).copied().unwrap_or(i);
            moved.insert(j, at_i);
            at_j
        })
        .collect()
}

/// What to do when a sampled level exceeds [`RunOptions::level_cap`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapPolicy {
    /// Fail the run.
    #[default]
    Abort,
    /// Stop the path at the last admissible level and flag the run as biased.
    Truncate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub cost: CostModel,
    /// Largest subset a provider may be asked to process.
    pub level_cap: Option<usize>,
    pub cap_policy: CapPolicy,
    /// Keep every replicate in the returned estimate.
    pub keep_replicates: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            cost: CostModel::default(),
            level_cap: None,
            cap_policy: CapPolicy::Abort,
            keep_replicates: true,
        }
    }
}

/// Evaluation of one level of a path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelEvaluation {
    pub level: usize,
    pub size: usize,
    pub seed: u64,
    pub likelihood_evals: u64,
    pub values: Vec<f64>,
}

/// Partial expectations `φ_1..φ_T` with their provenance.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PartialExpectationPath {
    pub levels: Vec<LevelEvaluation>,
}

impl PartialExpectationPath {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// The path of one functional.
    pub fn values(&self, component: usize) -> Vec<f64> {
        self.levels.iter().map(|l| l.values[component]).collect()
    }

    pub fn batch_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.size).collect()
    }

    pub fn likelihood_evals(&self) -> u64 {
        self.levels.iter().map(|l| l.likelihood_evals).sum()
    }
}

/// Evaluates levels `1..=truncation` of a path on nested prefixes of `order`.
/// Levels run concurrently; level `t` uses the sub-seed `(seed, t)`.
pub fn evaluate_path<P: ExpectationProvider + ?Sized>(
    provider: &P,
    schedule: &BatchSchedule,
    order: &[usize],
    truncation: usize,
    seed: u64,
    cost: &CostModel,
) -> Result<PartialExpectationPath, EstimatorError> {
    let dim = provider.output_dim();
    let levels = (1..=truncation)
        .into_par_iter()
        .map(|t| {
            let size = schedule.size(t);
            let level_seed = derive(seed, seed::stream::LEVEL, t as u64);
            let values = provider
                .evaluate(&order[..size], level_seed)
                .map_err(|source| EstimatorError::Provider { level: t, source })?;
            if values.len() != dim {
                return Err(EstimatorError::OutputDimension {
                    level: t,
                    expected: dim,
                    got: values.len(),
                });
            }
            Ok(LevelEvaluation {
                level: t,
                size,
                seed: level_seed,
                likelihood_evals: cost.level_cost(size),
                values,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PartialExpectationPath { levels })
}

/// One truncated path's estimate and its cost ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasReplicate {
    /// Position in the run, starting at 0.
    pub index: usize,
    pub seed: u64,
    /// Truncation level `T_r` that was evaluated.
    pub truncation: usize,
    pub phi_star: f64,
    /// Estimates of every provider output; `phi_star` is the primary one.
    pub components: Vec<f64>,
    pub likelihood_evals: u64,
    /// The sampled level was above the memory cap and the path was cut short.
    pub budget_truncated: bool,
}

impl DebiasReplicate {
    /// Builds a replicate from an evaluated path.
    pub fn from_path(
        path: &PartialExpectationPath,
        dist: &TruncationDistribution,
        primary: usize,
        seed: u64,
    ) -> Result<Self, EstimatorError> {
        let dim = path.levels.first().ok_or(EstimatorError::EmptyPath)?.values.len();
        let components = (0..dim)
            .map(|j| telescoping_estimate(&path.values(j), dist))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            index: 0,
            seed,
            truncation: path.len(),
            phi_star: components[primary],
            components,
            likelihood_evals: path.likelihood_evals(),
            budget_truncated: false,
        })
    }
}

fn check_setup<P: ExpectationProvider + ?Sized>(
    provider: &P,
    schedule: &BatchSchedule,
    dist: &TruncationDistribution,
) -> Result<(), EstimatorError> {
    if dist.levels() != schedule.levels() {
        return Err(EstimatorError::LengthMismatch {
            dist: dist.levels(),
            schedule: schedule.levels(),
        });
    }
    if provider.dataset_size() < schedule.total() {
        return Err(EstimatorError::DatasetTooSmall {
            needed: schedule.total(),
            available: provider.dataset_size(),
        });
    }
    Ok(())
}

/// Runs one replicate: draws `T`, a random permutation of the first `N`
/// observations, and evaluates levels `1..=T` on its nested prefixes.
pub fn run_replication<P: ExpectationProvider + ?Sized>(
    provider: &P,
    schedule: &BatchSchedule,
    dist: &TruncationDistribution,
    options: &RunOptions,
    seed: u64,
) -> Result<DebiasReplicate, EstimatorError> {
    check_setup(provider, schedule, dist)?;
    let sampled = dist.sample(&mut rng_from(derive(seed, seed::stream::TRUNCATION, 0)));
    let mut truncation = sampled;
    if let Some(cap) = options.level_cap {
        if schedule.size(sampled) > cap {
            let admissible = schedule.sizes().iter().take_while(|&&n| n <= cap).count();
            if options.cap_policy == CapPolicy::Abort || admissible == 0 {
                return Err(EstimatorError::LevelExceedsCap {
                    level: sampled,
                    size: schedule.size(sampled),
                    cap,
                });
            }
            truncation = admissible;
        }
    }
    let mut perm_rng = rng_from(derive(seed, seed::stream::PERMUTATION, 0));
    let order = random_prefix(schedule.total(), schedule.size(truncation), &mut perm_rng);
    let path = evaluate_path(provider, schedule, &order, truncation, seed, &options.cost)?;
    let mut replicate = DebiasReplicate::from_path(&path, dist, provider.primary_component(), seed)?;
    replicate.budget_truncated = truncation < sampled;
    Ok(replicate)
}

/// Stopping rule for the replication loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    Replications(usize),
    /// Stop at the first `r ≥ 10` with standard error at most `epsilon`.
    Tolerance { epsilon: f64, max_replications: usize },
}

impl StopRule {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        match *self {
            StopRule::Replications(0) => Err(EstimatorError::InvalidStopRule(
                "replications must be at least 1".into(),
            )),
            StopRule::Tolerance { epsilon, .. } if !(epsilon.is_finite() && epsilon > 0.0) => Err(
                EstimatorError::InvalidStopRule(format!("tolerance must be positive, got {epsilon}")),
            ),
            StopRule::Tolerance { max_replications, .. } if max_replications == 0 => Err(
                EstimatorError::InvalidStopRule("max_replications must be at least 1".into()),
            ),
            _ => Ok(()),
        }
    }

    fn cap(&self) -> usize {
        match *self {
            StopRule::Replications(r) => r,
            StopRule::Tolerance { max_replications, .. } => max_replications,
        }
    }
}

/// Receives replicates in run order as they are aggregated.
pub trait ReplicateSink {
    fn accept(&mut self, replicate: &DebiasReplicate) -> std::io::Result<()>;
}

impl ReplicateSink for () {
    fn accept(&mut self, _: &DebiasReplicate) -> std::io::Result<()> {
        Ok(())
    }
}

impl ReplicateSink for Vec<DebiasReplicate> {
    fn accept(&mut self, replicate: &DebiasReplicate) -> std::io::Result<()> {
        self.push(replicate.clone());
        Ok(())
    }
}

/// Aggregate over `R` replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasEstimate {
    pub mean: f64,
    /// `None` for a single replicate.
    pub sample_variance: Option<f64>,
    pub stderr: Option<f64>,
    pub replications: usize,
    pub total_likelihood_evals: u64,
    pub component_means: Vec<f64>,
    pub component_stderrs: Vec<Option<f64>>,
    /// At least one path was cut at the memory cap; the estimate is biased.
    pub budget_truncated: bool,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub replicates: Vec<DebiasReplicate>,
}

impl DebiasEstimate {
    /// Normal-approximation 95% interval.
    pub fn ci95(&self) -> Option<(f64, f64)> {
        self.stderr.map(|se| (self.mean - 1.96 * se, self.mean + 1.96 * se))
    }

    /// Aggregates replicates in order; `None` when empty.
    pub fn from_replicates(replicates: &[DebiasReplicate], primary: usize) -> Option<Self> {
        let mut agg = Aggregator::new(replicates.first()?.components.len(), true).with_primary(primary);
        replicates.iter().for_each(|r| agg.push(r));
        Some(agg.finish())
    }
}

/// Incremental reduction of replicates in run order.
#[derive(Debug, Clone)]
pub struct Aggregator {
    primary: usize,
    components: Vec<RunningStats>,
    total_evals: u64,
    truncated: bool,
    keep: bool,
    replicates: Vec<DebiasReplicate>,
}

impl Aggregator {
    pub fn new(dim: usize, keep_replicates: bool) -> Self {
        Self {
            primary: 0,
            components: vec![RunningStats::new(); dim],
            total_evals: 0,
            truncated: false,
            keep: keep_replicates,
            replicates: Vec::new(),
        }
    }

    pub fn with_primary(mut self, primary: usize) -> Self {
        self.primary = primary;
        self
    }

    pub fn push(&mut self, replicate: &DebiasReplicate) {
        for (stats, value) in self.components.iter_mut().zip(&replicate.components) {
            stats.push(*value);
        }
        self.total_evals += replicate.likelihood_evals;
        self.truncated |= replicate.budget_truncated;
        if self.keep {
            self.replicates.push(replicate.clone());
        }
    }

    pub fn count(&self) -> usize {
        self.components.first().map_or(0, RunningStats::count)
    }

    pub fn stderr(&self) -> Option<f64> {
        self.components.get(self.primary).and_then(RunningStats::stderr)
    }

    pub fn finish(self) -> DebiasEstimate {
        let primary = self.components[self.primary];
        DebiasEstimate {
            mean: primary.mean(),
            sample_variance: primary.sample_variance(),
            stderr: primary.stderr(),
            replications: primary.count(),
            total_likelihood_evals: self.total_evals,
            component_means: self.components.iter().map(RunningStats::mean).collect(),
            component_stderrs: self.components.iter().map(RunningStats::stderr).collect(),
            budget_truncated: self.truncated,
            replicates: self.replicates,
        }
    }
}

/// Seed of replicate `r` under `master_seed`.
pub fn replicate_seed(master_seed: u64, r: usize) -> u64 {
    derive(master_seed, seed::stream::REPLICATE, r as u64)
}

/// Runs replicates until the stop rule is met and aggregates them.
pub fn run_debias<P: ExpectationProvider + ?Sized>(
    provider: &P,
    schedule: &BatchSchedule,
    dist: &TruncationDistribution,
    options: &RunOptions,
    stop: StopRule,
    master_seed: u64,
) -> Result<DebiasEstimate, EstimatorError> {
    run_debias_with_sink(provider, schedule, dist, options, stop, master_seed, &mut ())
}

/// [`run_debias`], forwarding each replicate to `sink` in run order.
pub fn run_debias_with_sink<P: ExpectationProvider + ?Sized, S: ReplicateSink + ?Sized>(
    provider: &P,
    schedule: &BatchSchedule,
    dist: &TruncationDistribution,
    options: &RunOptions,
    stop: StopRule,
    master_seed: u64,
    sink: &mut S,
) -> Result<DebiasEstimate, EstimatorError> {
    stop.validate()?;
    check_setup(provider, schedule, dist)?;
    let mut agg = Aggregator::new(provider.output_dim(), options.keep_replicates)
        .with_primary(provider.primary_component());
    let cap = stop.cap();
    let mut start = 0;
    while start < cap {
        let end = (start + CHUNK).min(cap);
        let chunk = (start..end)
            .into_par_iter()
            .map(|r| {
                run_replication(provider, schedule, dist, options, replicate_seed(master_seed, r)).map(
                    |mut rep| {
                        rep.index = r;
                        rep
                    },
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        for replicate in &chunk {
            sink.accept(replicate)?;
            agg.push(replicate);
            if let StopRule::Tolerance { epsilon, .. } = stop {
                if agg.count() >= MIN_REPLICATES_FOR_TOLERANCE && agg.stderr().is_some_and(|se| se <= epsilon) {
                    return Ok(agg.finish());
                }
            }
        }
        start = end;
    }
    let estimate = agg.finish();
    match stop {
        StopRule::Tolerance { .. } => Err(EstimatorError::ToleranceUnreachable {
            partial: Box::new(estimate),
        }),
        StopRule::Replications(_) => Ok(estimate),
    }
}

/// Runs `f` on a dedicated pool of `workers` threads (`None`: rayon default).
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, EstimatorError> {
    match workers {
        None => Ok(f()),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map(|pool| pool.install(f))
            .map_err(|e| EstimatorError::WorkerPool(e.to_string())),
    }
}

/// Running statistics over replicates in run order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    /// Number of replicates so far (1-based).
    pub r: usize,
    pub running_mean: f64,
    /// Half-width `1.96·stderr`; `None` for a single replicate.
    pub ci95: Option<f64>,
    pub cumulative_evals: u64,
}

pub fn convergence_trace(replicates: &[DebiasReplicate]) -> Vec<TracePoint> {
    let mut stats = RunningStats::new();
    let mut evals = 0u64;
    replicates
        .iter()
        .map(|rep| {
            stats.push(rep.phi_star);
            evals += rep.likelihood_evals;
            TracePoint {
                r: stats.count(),
                running_mean: stats.mean(),
                ci95: stats.stderr().map(|se| 1.96 * se),
                cumulative_evals: evals,
            }
        })
        .collect()
}
