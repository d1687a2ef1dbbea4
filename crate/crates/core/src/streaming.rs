//! Debiasing over an unbounded i.i.d. stream under a worst-case batch budget.
//!
//! Each replicate draws `T`, takes a fresh block of `n_T` observations from
//! the source, evaluates the path on prefixes of that block and discards it.
//! The constant-batch baseline averages estimates from disjoint fixed-size
//! batches whose size matches the debiased scheme's expected cost.

use std::fs::File;
use std::io::{BufRead, BufReader, Lines};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{
    convergence_trace, evaluate_path, replicate_seed, Aggregator, DebiasEstimate, DebiasReplicate, EstimatorError,
    TracePoint,
};
use crate::models::dataset::{parse_row, SyntheticRows};
use crate::models::{DatasetError, DatasetHeader, ExpectationProvider, ProviderError, SyntheticSpec};
use crate::schedule::{expected_likelihood_evals, BatchSchedule, CostModel, ScheduleError, TruncationDistribution};
use crate::seed::{self, derive, rng_from};

/// Replicates whose blocks are captured before evaluating them concurrently.
const CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("stream exhausted: needed {needed} more observations, got {available}")]
    Exhausted { needed: usize, available: usize },
    #[error(transparent)]
    Source(#[from] DatasetError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("building provider: {0}")]
    Provider(#[from] ProviderError),
    #[error("invalid streaming setup: {0}")]
    Invalid(String),
}

/// Sequential source of row-major observations.
pub trait ObservationSource: Send {
    fn columns(&self) -> usize;

    /// The next `n` rows, or `Exhausted` if fewer remain.
    fn next_block(&mut self, n: usize) -> Result<Vec<f64>, StreamError>;

    /// Rows handed out so far.
    fn consumed(&self) -> u64;
}

/// Unbounded source backed by a synthetic generator.
pub struct GeneratorSource {
    rows: SyntheticRows,
    columns: usize,
    consumed: u64,
}

impl GeneratorSource {
    pub fn new(spec: &SyntheticSpec) -> Result<Self, StreamError> {
        Ok(Self {
            columns: spec.header()?.columns(),
            rows: spec.stream()?,
            consumed: 0,
        })
    }
}

impl ObservationSource for GeneratorSource {
    fn columns(&self) -> usize {
        self.columns
    }

    fn next_block(&mut self, n: usize) -> Result<Vec<f64>, StreamError> {
        let mut out = Vec::with_capacity(n * self.columns);
        for row in self.rows.by_ref().take(n) {
            out.extend(row);
        }
        self.consumed += n as u64;
        Ok(out)
    }

    fn consumed(&self) -> u64 {
        self.consumed
    }
}

/// Rows read lazily from a dataset file.
pub struct FileSource {
    lines: Lines<BufReader<File>>,
    header: DatasetHeader,
    line_no: usize,
    consumed: u64,
}

impl FileSource {
    pub fn open<P: AsRef<Path>>(path: P) -> Result<Self, StreamError> {
        let mut lines = BufReader::new(File::open(path).map_err(DatasetError::from)?).lines();
        let first = lines
            .next()
            .ok_or(DatasetError::Parse {
                line: 1,
                message: "empty file".into(),
            })?
            .map_err(DatasetError::from)?;
        Ok(Self {
            header: DatasetHeader::parse(&first)?,
            lines,
            line_no: 1,
            consumed: 0,
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }
}

impl ObservationSource for FileSource {
    fn columns(&self) -> usize {
        self.header.columns()
    }

    fn next_block(&mut self, n: usize) -> Result<Vec<f64>, StreamError> {
        let cols = self.columns();
        let mut out = Vec::with_capacity(n * cols);
        let mut got = 0;
        while got < n {
            let Some(line) = self.lines.next() else {
                return Err(StreamError::Exhausted { needed: n, available: got });
            };
            self.line_no += 1;
            let line = line.map_err(DatasetError::from)?;
            if line.trim().is_empty() {
                continue;
            }
            parse_row(&line, cols, self.line_no, &mut out)?;
            got += 1;
        }
        self.consumed += n as u64;
        Ok(out)
    }

    fn consumed(&self) -> u64 {
        self.consumed
    }
}

/// Finite in-memory source.
#[derive(Debug, Clone)]
pub struct VecSource {
    values: Vec<f64>,
    columns: usize,
    position: usize,
}

impl VecSource {
    pub fn new(values: Vec<f64>, columns: usize) -> Result<Self, StreamError> {
        if columns == 0 || values.len() % columns != 0 {
            return Err(StreamError::Invalid(format!(
                "{} values do not form rows of {columns} columns",
                values.len()
            )));
        }
        Ok(Self {
            values,
            columns,
            position: 0,
        })
    }
}

impl ObservationSource for VecSource {
    fn columns(&self) -> usize {
        self.columns
    }

    fn next_block(&mut self, n: usize) -> Result<Vec<f64>, StreamError> {
        let available = (self.values.len() - self.position) / self.columns;
        if available < n {
            return Err(StreamError::Exhausted { needed: n, available });
        }
        let end = self.position + n * self.columns;
        let block = self.values[self.position..end].to_vec();
        self.position = end;
        Ok(block)
    }

    fn consumed(&self) -> u64 {
        (self.position / self.columns) as u64
    }
}

/// Worst-case batch `n_max` with the schedule and truncation law over it.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamBudget {
    schedule: BatchSchedule,
    dist: TruncationDistribution,
}

impl StreamBudget {
    pub fn new(schedule: BatchSchedule, dist: TruncationDistribution) -> Result<Self, StreamError> {
        if dist.levels() != schedule.levels() {
            return Err(ScheduleError::LengthMismatch {
                dist: dist.levels(),
                schedule: schedule.levels(),
            }
            .into());
        }
        Ok(Self { schedule, dist })
    }

    /// Geometric schedule from `min_batch` up to `n_max` with truncation exponent `alpha`.
    pub fn geometric(min_batch: usize, ratio: usize, n_max: usize, alpha: f64) -> Result<Self, StreamError> {
        let schedule = BatchSchedule::geometric(min_batch, ratio, n_max)?;
        let dist = TruncationDistribution::geometric(alpha, schedule.levels())?;
        Self::new(schedule, dist)
    }

    pub fn n_max(&self) -> usize {
        self.schedule.total()
    }

    pub fn schedule(&self) -> &BatchSchedule {
        &self.schedule
    }

    pub fn dist(&self) -> &TruncationDistribution {
        &self.dist
    }

    /// Expected observations processed per replicate, `E[Σ_{t≤T} n_t]`.
    pub fn expected_processed(&self) -> f64 {
        expected_likelihood_evals(&self.schedule, &self.dist, &CostModel::default()).expect("levels checked")
    }

    /// Constant batch size with the same expected cost per replicate.
    pub fn cost_matched_batch_size(&self) -> usize {
        (self.expected_processed().round() as usize).max(1)
    }
}

/// Results of one scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEntry {
    pub estimate: DebiasEstimate,
    pub trace: Vec<TracePoint>,
    /// Observations taken from the stream.
    pub observations_drawn: u64,
    /// Observation visits summed over levels; the cost counter.
    pub observations_processed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub n_max: usize,
    pub batch_size: usize,
    pub debiased: StreamEntry,
    pub baseline: StreamEntry,
    /// Baseline batch size over the debiased scheme's expected cost.
    pub expected_cost_ratio: f64,
    /// Realized processed-observation ratio, baseline over debiased.
    pub realized_cost_ratio: f64,
}

fn entry(agg: Aggregator, drawn: u64, processed: u64) -> StreamEntry {
    let estimate = agg.finish();
    StreamEntry {
        trace: convergence_trace(&estimate.replicates),
        estimate,
        observations_drawn: drawn,
        observations_processed: processed,
    }
}

/// Runs `R` debiased replicates, each on a fresh block of the stream.
pub fn run_streaming_debias<S, P, F>(
    source: &mut S,
    budget: &StreamBudget,
    provider_factory: F,
    replications: usize,
    seed: u64,
    cost: &CostModel,
) -> Result<StreamEntry, StreamError>
where
    S: ObservationSource + ?Sized,
    P: ExpectationProvider,
    F: Fn(Vec<f64>) -> Result<P, ProviderError> + Sync,
{
    if replications == 0 {
        return Err(StreamError::Invalid("replications must be at least 1".into()));
    }
    let schedule = &budget.schedule;
    let mut agg: Option<Aggregator> = None;
    let (mut drawn, mut processed) = (0u64, 0u64);
    let mut start = 0;
    while start < replications {
        let end = (start + CHUNK).min(replications);
        let mut jobs = Vec::with_capacity(end - start);
        for r in start..end {
            let rep_seed = replicate_seed(seed, r);
            let t = budget.dist.sample(&mut rng_from(derive(rep_seed, seed::stream::TRUNCATION, 0)));
            let n = schedule.size(t);
            let block = source.next_block(n)?;
            drawn += n as u64;
            processed += schedule.sizes()[..t].iter().sum::<usize>() as u64;
            jobs.push((r, rep_seed, t, block));
        }
        let done = jobs
            .into_par_iter()
            .map(|(r, rep_seed, t, block)| {
                let provider = provider_factory(block)?;
                let order: Vec<usize> = (0..schedule.size(t)).collect();
                let path = evaluate_path(&provider, schedule, &order, t, rep_seed, cost)?;
                let mut rep = DebiasReplicate::from_path(&path, &budget.dist, provider.primary_component(), rep_seed)?;
                rep.index = r;
                Ok::<_, StreamError>(rep)
            })
            .collect::<Result<Vec<_>, _>>()?;
        for rep in &done {
            agg.get_or_insert_with(|| Aggregator::new(rep.components.len(), true))
                .push(rep);
        }
        start = end;
    }
    Ok(entry(agg.expect("at least one replicate"), drawn, processed))
}

/// Averages estimates from `R` consecutive disjoint batches of `batch_size`.
pub fn run_constant_batch_baseline<S, P, F>(
    source: &mut S,
    batch_size: usize,
    provider_factory: F,
    replications: usize,
    seed: u64,
    cost: &CostModel,
) -> Result<StreamEntry, StreamError>
where
    S: ObservationSource + ?Sized,
    P: ExpectationProvider,
    F: Fn(Vec<f64>) -> Result<P, ProviderError> + Sync,
{
    if replications == 0 || batch_size == 0 {
        return Err(StreamError::Invalid("replications and batch size must be at least 1".into()));
    }
    let mut agg: Option<Aggregator> = None;
    let mut start = 0;
    while start < replications {
        let end = (start + CHUNK).min(replications);
        let mut jobs = Vec::with_capacity(end - start);
        for r in start..end {
            jobs.push((r, source.next_block(batch_size)?));
        }
        let done = jobs
            .into_par_iter()
            .map(|(r, block)| {
                let provider = provider_factory(block)?;
                let rep_seed = derive(seed, seed::stream::BASELINE, r as u64);
                let order: Vec<usize> = (0..batch_size).collect();
                let components = provider.evaluate(&order, derive(rep_seed, seed::stream::LEVEL, 1))?;
                Ok::<_, StreamError>(DebiasReplicate {
                    index: r,
                    seed: rep_seed,
                    truncation: 1,
                    phi_star: components[provider.primary_component()],
                    components,
                    likelihood_evals: cost.level_cost(batch_size),
                    budget_truncated: false,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        for rep in &done {
            agg.get_or_insert_with(|| Aggregator::new(rep.components.len(), true))
                .push(rep);
        }
        start = end;
    }
    let n = (replications * batch_size) as u64;
    Ok(entry(agg.expect("at least one replicate"), n, n))
}

/// Runs both schemes on one stream, debiased first, with the cost-matched
/// baseline batch size.
pub fn run_streaming_comparison<S, P, F>(
    source: &mut S,
    budget: &StreamBudget,
    provider_factory: F,
    replications: usize,
    seed: u64,
    cost: &CostModel,
) -> Result<StreamReport, StreamError>
where
    S: ObservationSource + ?Sized,
    P: ExpectationProvider,
    F: Fn(Vec<f64>) -> Result<P, ProviderError> + Sync,
{
    let batch_size = budget.cost_matched_batch_size();
    let debiased = run_streaming_debias(source, budget, &provider_factory, replications, seed, cost)?;
    let baseline = run_constant_batch_baseline(source, batch_size, &provider_factory, replications, seed, cost)?;
    Ok(StreamReport {
        n_max: budget.n_max(),
        batch_size,
        expected_cost_ratio: batch_size as f64 / budget.expected_processed(),
        realized_cost_ratio: baseline.observations_processed as f64 / debiased.observations_processed as f64,
        debiased,
        baseline,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::exact_expectation_oracle;
    use crate::models::{DatasetKind, GaussianMeanModel};
    use nalgebra::{DMatrix, DVector};

    fn factory(data: Vec<f64>) -> Result<GaussianMeanModel, ProviderError> {
        GaussianMeanModel::new(data, 1, DMatrix::from_element(1, 1, 4.0))?
            .with_prior(DVector::zeros(1), DMatrix::from_element(1, 1, 0.25))
    }

    fn source(seed: u64) -> GeneratorSource {
        let spec = SyntheticSpec::new(DatasetKind::GaussianMean, 0, seed)
            .with_param("dim", 1)
            .with_param("mean", 1.0)
            .with_param("cov", 4.0);
        GeneratorSource::new(&spec).unwrap()
    }

    #[test]
    fn empty_stream_is_exhausted() {
        let budget = StreamBudget::geometric(2, 2, 16, 0.5).unwrap();
        let mut empty = VecSource::new(Vec::new(), 1).unwrap();
        assert!(matches!(
            run_streaming_debias(&mut empty, &budget, factory, 1, 0, &CostModel::default()),
            Err(StreamError::Exhausted { .. })
        ));
        let mut empty = VecSource::new(Vec::new(), 1).unwrap();
        assert!(matches!(
            run_constant_batch_baseline(&mut empty, 4, factory, 1, 0, &CostModel::default()),
            Err(StreamError::Exhausted { .. })
        ));
    }

    #[test]
    fn single_replicate() {
        let budget = StreamBudget::geometric(2, 2, 16, 0.5).unwrap();
        let mut src = source(1);
        let e = run_streaming_debias(&mut src, &budget, factory, 1, 3, &CostModel::default()).unwrap();
        assert_eq!(e.estimate.replications, 1);
        assert_eq!(e.trace.len(), 1);
        assert_eq!(e.observations_drawn, src.consumed());
    }

    #[test]
    fn cost_matching_by_construction() {
        let budget = StreamBudget::geometric(8, 2, 1 << 14, 0.8).unwrap();
        let b = budget.cost_matched_batch_size();
        assert!((b as f64 / budget.expected_processed() - 1.0).abs() < 0.05);
    }

    #[test]
    fn full_batch_baseline_targets_n_max_posterior() {
        // batch_size = n_max: every baseline replicate is an n_max posterior mean
        let budget = StreamBudget::geometric(4, 2, 64, 0.5).unwrap();
        let cost = CostModel::default();
        let e = run_constant_batch_baseline(&mut source(2), budget.n_max(), factory, 4000, 5, &cost).unwrap();
        // E[posterior mean] = μ·(n/σ²)/(n/σ² + 1/s0²) with μ=1, σ²=4, s0²=0.25
        let target = 16.0 / (16.0 + 4.0);
        assert!((e.estimate.mean - target).abs() < 4.0 * e.estimate.stderr.unwrap());
    }

    #[test]
    fn debiased_stream_is_unbiased_for_n_max_posterior() {
        let budget = StreamBudget::geometric(2, 2, 64, 0.6).unwrap();
        let expected_path: Vec<f64> = budget
            .schedule()
            .sizes()
            .iter()
            .map(|&n| n as f64 / 4.0 / (n as f64 / 4.0 + 4.0))
            .collect();
        let oracle = exact_expectation_oracle(&expected_path, budget.dist()).unwrap();
        let e = run_streaming_debias(&mut source(3), &budget, factory, 20_000, 8, &CostModel::default()).unwrap();
        assert!((oracle - expected_path[expected_path.len() - 1]).abs() < 1e-12);
        assert!(
            (e.estimate.mean - oracle).abs() < 4.0 * e.estimate.stderr.unwrap(),
            "{} vs {oracle}",
            e.estimate.mean
        );
    }

    #[test]
    fn file_source_reads_sequentially() {
        let spec = SyntheticSpec::new(DatasetKind::LogGaussian, 10, 4);
        let dir = std::env::temp_dir().join(format!("stream-src-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("d.csv");
        spec.generate().unwrap().write_path(&path).unwrap();
        let mut src = FileSource::open(&path).unwrap();
        let all = spec.generate().unwrap();
        assert_eq!(src.next_block(4).unwrap(), all.values()[..4]);
        assert_eq!(src.next_block(6).unwrap(), all.values()[4..]);
        assert!(matches!(src.next_block(1), Err(StreamError::Exhausted { .. })));
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn comparison_report_is_deterministic() {
        let budget = StreamBudget::geometric(2, 2, 32, 0.7).unwrap();
        let run = || run_streaming_comparison(&mut source(9), &budget, factory, 100, 1, &CostModel::default()).unwrap();
        assert_eq!(run(), run());
    }
}
