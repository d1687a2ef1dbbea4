use std::path::PathBuf;

use debias_core::estimator::{random_prefix, run_debias_with_sink, with_workers, RunOptions};
use debias_core::models::{DatasetKind, SyntheticSpec};
use debias_core::schedule::{tradeoff_curve, TradeoffPoint};
use debias_core::seed::{derive, rng_from};
use debias_core::stats::RunningStats;
use debias_core::streaming::{
    run_streaming_comparison, FileSource, GeneratorSource, ObservationSource, StreamBudget, StreamReport,
};
use debias_core::{
    convergence_trace, BatchSchedule, ConvergenceFit, DebiasEstimate, EstimatorError, StopRule,
    TruncationDistribution,
};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{AlphaSetting, ExperimentConfig};
use crate::error::CliError;
use crate::output::{file_sha256, opt_cell, run_id, write_csv, write_json, JsonlSink};
use crate::setup::{
    build_model, cost_model, gaussian_model, load_dataset, resolve_alpha, resolve_fit, resolve_schedule, run_pilot,
    tags, tune_with_margin, BetaSource, PilotFit,
};

pub const REPLICATES_FILE: &str = "replicates.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const PILOT_FILE: &str = "pilot.json";
pub const TUNE_FILE: &str = "tune.json";
pub const TUNE_CURVE_FILE: &str = "tune.csv";
pub const CONVERGENCE_FILE: &str = "convergence.csv";
pub const STREAM_SUMMARY_FILE: &str = "stream_summary.json";
pub const STREAM_DEBIASED_FILE: &str = "stream_debiased.csv";
pub const STREAM_BASELINE_FILE: &str = "stream_baseline.csv";

fn in_workers<T: Send>(cfg: &ExperimentConfig, f: impl FnOnce() -> Result<T, CliError> + Send) -> Result<T, CliError> {
    with_workers(cfg.workers, f)?
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerateOutcome {
    pub path: PathBuf,
    pub rows: usize,
    pub columns: usize,
    pub sha256: String,
}

/// Writes a synthetic dataset to `data`.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<GenerateOutcome, CliError> {
    let kind = cfg
        .model
        .ok_or_else(|| CliError::Config("'model' is required for generate".into()))?;
    let n = cfg
        .n
        .ok_or_else(|| CliError::Config("'n' (number of rows) is required for generate".into()))?;
    let path = cfg
        .data
        .clone()
        .ok_or_else(|| CliError::Config("'data' (output path) is required for generate".into()))?;
    let mut spec = SyntheticSpec::new(kind, n, cfg.data_seed);
    spec.params = cfg.gen.clone();
    let header = spec.header()?;
    let writer = crate::output::create(&path)?;
    spec.write_to(writer)?;
    Ok(GenerateOutcome {
        sha256: file_sha256(&path)?,
        rows: n,
        columns: header.columns(),
        path,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PilotOutcome {
    #[serde(flatten)]
    pub pilot: PilotFit,
    pub path: PathBuf,
}

/// Fits the decay exponent from a pilot over the first levels and writes `pilot.json`.
pub fn cmd_pilot(cfg: &ExperimentConfig) -> Result<PilotOutcome, CliError> {
    let dataset = load_dataset(cfg)?;
    let (schedule, _) = resolve_schedule(cfg, dataset.len())?;
    let dataset = dataset.truncated(schedule.total());
    let model = build_model(cfg, &dataset)?;
    let pilot = in_workers(cfg, || run_pilot(cfg, model.provider(), &schedule))?;
    let path = cfg.out_dir.join(PILOT_FILE);
    write_json(
        &path,
        &json!({
            "config": cfg.echo(),
            "master_seed": cfg.seed,
            "fit": pilot.fit,
            "sizes": pilot.sizes,
            "squared_diffs": pilot.squared_diffs,
            "reference": pilot.reference,
            "repeats": pilot.repeats,
        }),
    )?;
    Ok(PilotOutcome { pilot, path })
}

#[derive(Debug, Clone, Serialize)]
pub struct TuneOutcome {
    pub alpha: f64,
    pub work_variance: f64,
    pub fitted_beta: f64,
    pub beta_used: f64,
    pub min_batch: usize,
    pub total: usize,
    pub requested_total: Option<usize>,
    pub levels: usize,
    /// Grid points plus the selected exponent, sorted by `α`.
    pub curve: Vec<TradeoffPoint>,
}

/// Selects `α` for a fitted decay and writes the tradeoff curve.
pub fn cmd_tune(cfg: &ExperimentConfig) -> Result<TuneOutcome, CliError> {
    let (schedule, requested, kind) = match (&cfg.data, cfg.total) {
        (Some(_), _) => {
            let dataset = load_dataset(cfg)?;
            let (s, r) = resolve_schedule(cfg, dataset.len())?;
            (s, r, Some(dataset.kind()))
        }
        (None, Some(total)) => {
            let (s, r) = resolve_schedule(cfg, total)?;
            (s, r, cfg.model)
        }
        (None, None) => return Err(CliError::Config("tune needs 'data' or 'total'".into())),
    };
    let cost = cost_model(cfg, kind);
    let (fit, _) = resolve_fit(cfg, None)?;
    tune_report(cfg, &schedule, requested, &fit, &cost)
}

fn tune_report(
    cfg: &ExperimentConfig,
    schedule: &BatchSchedule,
    requested: Option<usize>,
    fit: &ConvergenceFit,
    cost: &debias_core::CostModel,
) -> Result<TuneOutcome, CliError> {
    let (tuning, used) = tune_with_margin(cfg, schedule, fit, cost)?;
    let (lo, hi) = (debias_core::schedule::ALPHA_MARGIN, used.beta - debias_core::schedule::ALPHA_MARGIN);
    let mut alphas: Vec<f64> = (0..cfg.alpha_grid)
        .map(|i| lo + (hi - lo) * i as f64 / (cfg.alpha_grid - 1) as f64)
        .collect();
    alphas.push(tuning.alpha);
    alphas.sort_by(f64::total_cmp);
    let curve = tradeoff_curve(schedule, &used, cost, &alphas)?;
    let outcome = TuneOutcome {
        alpha: tuning.alpha,
        work_variance: tuning.work_variance,
        fitted_beta: fit.beta,
        beta_used: used.beta,
        min_batch: schedule.min_batch(),
        total: schedule.total(),
        requested_total: requested,
        levels: schedule.levels(),
        curve,
    };
    write_json(
        &cfg.out_dir.join(TUNE_FILE),
        &json!({ "config": cfg.echo(), "master_seed": cfg.seed, "result": outcome }),
    )?;
    write_csv(
        &cfg.out_dir.join(TUNE_CURVE_FILE),
        cfg.echo(),
        &["alpha", "expected_cost", "moment_bound", "product"],
        outcome.curve.iter().map(|p| {
            vec![
                p.alpha.to_string(),
                p.expected_cost.to_string(),
                p.moment_bound.to_string(),
                p.product.to_string(),
            ]
        }),
    )?;
    Ok(outcome)
}

#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    pub run_id: String,
    pub estimate: DebiasEstimate,
    pub functional: String,
    pub alpha: f64,
    pub beta_source: Option<BetaSource>,
    pub sizes: Vec<usize>,
    pub requested_total: Option<usize>,
    pub full_data_value: Option<Vec<f64>>,
    pub prediction_mse: Option<f64>,
    pub replicates_path: PathBuf,
    pub summary_path: PathBuf,
    pub trace_path: PathBuf,
}

/// Runs the debiased estimator and writes replicates, summary and trace.
///
/// When a tolerance rule hits its replication cap, the finished replicates and
/// a summary of them are still written before the budget error is returned.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunOutcome, CliError> {
    let dataset = load_dataset(cfg)?;
    let data_sha = cfg.data.as_deref().map(file_sha256).transpose()?;
    let (schedule, requested) = resolve_schedule(cfg, dataset.len())?;
    let dataset = dataset.truncated(schedule.total());
    let model = build_model(cfg, &dataset)?;
    let provider = model.provider();
    let cost = cost_model(cfg, Some(dataset.kind()));
    let mut cfg = cfg.clone();
    let (dist, beta_source) = in_workers(&cfg, || resolve_alpha(&cfg, &schedule, &cost, Some(provider)))?;
    cfg.record("resolved_alpha", dist.alpha());
    cfg.record("resolved_total", schedule.total());
    let options = RunOptions {
        cost,
        level_cap: cfg.level_cap,
        cap_policy: cfg.cap_policy,
        keep_replicates: true,
    };
    let replicates_path = cfg.out_dir.join(REPLICATES_FILE);
    let mut sink = JsonlSink::create(&replicates_path, cfg.echo(), cfg.seed)?;
    let result = in_workers(&cfg, || {
        Ok(run_debias_with_sink(provider, &schedule, &dist, &options, cfg.stop, cfg.seed, &mut sink))
    })?;
    sink.finish()?;
    let (estimate, failure) = match result {
        Ok(e) => (e, None),
        Err(EstimatorError::ToleranceUnreachable { partial }) => {
            let msg = format!(
                "tolerance not reached after {} replications (stderr {})",
                partial.replications,
                opt_cell(partial.stderr)
            );
            (*partial, Some(CliError::Budget(msg)))
        }
        Err(e) => return Err(e.into()),
    };
    let full_data_value = model.full_data_value()?;
    let prediction_mse = model.prediction_mse(&estimate.component_means)?;
    let id = run_id(cfg.echo(), data_sha.as_deref());
    let summary_path = cfg.out_dir.join(SUMMARY_FILE);
    write_json(
        &summary_path,
        &json!({
            "run_id": id,
            "config": cfg.echo(),
            "master_seed": cfg.seed,
            "data_sha256": data_sha,
            "functional": provider.functional_name(),
            "mean": estimate.mean,
            "stderr": estimate.stderr,
            "ci95": estimate.ci95(),
            "R": estimate.replications,
            "total_evals": estimate.total_likelihood_evals,
            "component_means": estimate.component_means,
            "component_stderrs": estimate.component_stderrs,
            "budget_truncated": estimate.budget_truncated,
            "alpha": dist.alpha(),
            "beta_source": beta_source,
            "sizes": schedule.sizes(),
            "requested_total": requested,
            "full_data_value": full_data_value,
            "prediction_mse": prediction_mse,
            "complete": failure.is_none(),
        }),
    )?;
    let trace_path = cfg.out_dir.join(TRACE_FILE);
    write_csv(
        &trace_path,
        cfg.echo(),
        &["r", "running_mean", "ci95_halfwidth", "cumulative_evals"],
        convergence_trace(&estimate.replicates).iter().map(|p| {
            vec![
                p.r.to_string(),
                p.running_mean.to_string(),
                opt_cell(p.ci95),
                p.cumulative_evals.to_string(),
            ]
        }),
    )?;
    if let Some(err) = failure {
        return Err(err);
    }
    Ok(RunOutcome {
        run_id: id,
        functional: provider.functional_name(),
        alpha: dist.alpha(),
        beta_source,
        sizes: schedule.sizes().to_vec(),
        requested_total: requested,
        full_data_value,
        prediction_mse,
        estimate,
        replicates_path,
        summary_path,
        trace_path,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub mean: f64,
    /// `None` for a single repeat.
    pub sd: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub repeats: usize,
}

impl ConvergenceRow {
    pub fn band_width(&self) -> Option<f64> {
        Some(self.upper? - self.lower?)
    }
}

/// Partial expectations on `repeats` random subsets per size, summarized as
/// mean ± 1.96 sd.
pub fn cmd_convergence(cfg: &ExperimentConfig) -> Result<Vec<ConvergenceRow>, CliError> {
    let dataset = load_dataset(cfg)?;
    let sizes = match &cfg.convergence_sizes {
        Some(s) => s.clone(),
        None => resolve_schedule(cfg, dataset.len())?.0.sizes().to_vec(),
    };
    let n = sizes.iter().copied().max().unwrap_or(0);
    if n > dataset.len() || sizes.contains(&0) {
        return Err(CliError::Config(format!(
            "convergence sizes must lie in 1..={}",
            dataset.len()
        )));
    }
    let model = build_model(cfg, &dataset)?;
    let provider = model.provider();
    let primary = provider.primary_component();
    let jobs: Vec<(usize, usize)> = (0..sizes.len())
        .flat_map(|i| (0..cfg.repeats).map(move |k| (i, k)))
        .collect();
    let values = in_workers(cfg, || {
        jobs.par_iter()
            .map(|&(i, k)| {
                let seed = derive(derive(cfg.seed, tags::CONVERGENCE, i as u64), tags::CONVERGENCE, k as u64);
                let subset = random_prefix(dataset.len(), sizes[i], &mut rng_from(seed));
                Ok(provider.evaluate(&subset, derive(seed, debias_core::seed::stream::LEVEL, 1))?[primary])
            })
            .collect::<Result<Vec<f64>, CliError>>()
    })?;
    let rows: Vec<ConvergenceRow> = sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let stats: RunningStats = values[i * cfg.repeats..(i + 1) * cfg.repeats].iter().copied().collect();
            let sd = stats.sample_variance().map(f64::sqrt);
            ConvergenceRow {
                n,
                mean: stats.mean(),
                sd,
                lower: sd.map(|s| stats.mean() - 1.96 * s),
                upper: sd.map(|s| stats.mean() + 1.96 * s),
                repeats: cfg.repeats,
            }
        })
        .collect();
    write_csv(
        &cfg.out_dir.join(CONVERGENCE_FILE),
        cfg.echo(),
        &["n", "mean", "sd", "lower", "upper", "repeats", "band_defined"],
        rows.iter().map(|r| {
            vec![
                r.n.to_string(),
                r.mean.to_string(),
                opt_cell(r.sd),
                opt_cell(r.lower),
                opt_cell(r.upper),
                r.repeats.to_string(),
                r.sd.is_some().to_string(),
            ]
        }),
    )?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct StreamOutcome {
    pub report: StreamReport,
    pub alpha: f64,
    pub cost_matched: bool,
}

/// Streaming comparison of the debiased and constant-batch schemes.
pub fn cmd_stream(cfg: &ExperimentConfig) -> Result<StreamOutcome, CliError> {
    let StopRule::Replications(replications) = cfg.stop else {
        return Err(CliError::Config("stream needs a fixed 'replications' count".into()));
    };
    let n_max = cfg.n_max.unwrap_or(1 << 14);
    let schedule = BatchSchedule::geometric(cfg.min_batch, cfg.ratio, n_max)?;
    let mut source: Box<dyn ObservationSource> = match &cfg.data {
        Some(path) => Box::new(FileSource::open(path)?),
        None => {
            let kind = cfg
                .model
                .ok_or_else(|| CliError::Config("stream needs 'data' or a 'model' to generate".into()))?;
            let mut spec = SyntheticSpec::new(kind, 0, cfg.data_seed);
            spec.params = cfg.gen.clone();
            Box::new(GeneratorSource::new(&spec)?)
        }
    };
    let (kind, header) = match &cfg.data {
        Some(path) => {
            let src = FileSource::open(path)?;
            (src.header().kind, src.header().clone())
        }
        None => {
            let mut spec = SyntheticSpec::new(cfg.model.expect("checked"), 0, cfg.data_seed);
            spec.params = cfg.gen.clone();
            (spec.kind, spec.header()?)
        }
    };
    let cost = cost_model(cfg, Some(kind));
    let alpha = match cfg.alpha {
        AlphaSetting::Fixed(a) => a,
        AlphaSetting::Auto => {
            let (fit, _) = resolve_fit(cfg, None)?;
            tune_with_margin(cfg, &schedule, &fit, &cost)?.0.alpha
        }
    };
    let budget = StreamBudget::new(schedule.clone(), TruncationDistribution::geometric(alpha, schedule.levels())?)?;
    let dim = header.dim;
    let default_cov: Option<Vec<f64>> = header
        .params
        .get("cov")
        .map(|s| s.split(';').filter_map(|v| v.trim().parse().ok()).collect());
    let report = in_workers(cfg, || {
        let report = match kind {
            DatasetKind::GaussianMean => run_streaming_comparison(
                source.as_mut(),
                &budget,
                |block| {
                    gaussian_model(cfg, block, dim, default_cov.as_deref())
                        .map_err(|e| debias_core::models::ProviderError::InvalidModel(e.to_string()))
                },
                replications,
                cfg.seed,
                &cost,
            )?,
            DatasetKind::LogGaussian => run_streaming_comparison(
                source.as_mut(),
                &budget,
                |block| debias_core::models::LogGaussianModel::new(&block, cfg.sampler),
                replications,
                cfg.seed,
                &cost,
            )?,
            DatasetKind::Logistic => run_streaming_comparison(
                source.as_mut(),
                &budget,
                |block| {
                    let (x, y): (Vec<Vec<f64>>, Vec<f64>) =
                        block.chunks_exact(dim + 1).map(|r| (r[..dim].to_vec(), r[dim])).unzip();
                    debias_core::models::LogisticRegressionModel::new(&x.concat(), &y, dim, cfg.sampler)?
                        .with_weight_index(cfg.component)
                },
                replications,
                cfg.seed,
                &cost,
            )?,
            DatasetKind::RffRegression => {
                return Err(CliError::Config(
                    "streaming is not supported for rff_regression (the test set is tied to a fixed dataset)".into(),
                ))
            }
        };
        Ok(report)
    })?;
    let cost_matched = (report.expected_cost_ratio - 1.0).abs() <= 0.05;
    let mut cfg = cfg.clone();
    cfg.record("resolved_alpha", alpha);
    let trace_rows = |e: &debias_core::streaming::StreamEntry| -> Vec<Vec<String>> {
        e.trace
            .iter()
            .map(|p| {
                vec![
                    p.r.to_string(),
                    p.running_mean.to_string(),
                    opt_cell(p.ci95),
                    p.cumulative_evals.to_string(),
                ]
            })
            .collect()
    };
    let header_row = ["r", "running_mean", "ci95_halfwidth", "cumulative_evals"];
    write_csv(&cfg.out_dir.join(STREAM_DEBIASED_FILE), cfg.echo(), &header_row, trace_rows(&report.debiased))?;
    write_csv(&cfg.out_dir.join(STREAM_BASELINE_FILE), cfg.echo(), &header_row, trace_rows(&report.baseline))?;
    let scheme = |e: &debias_core::streaming::StreamEntry| {
        json!({
            "mean": e.estimate.mean,
            "stderr": e.estimate.stderr,
            "ci95": e.estimate.ci95(),
            "R": e.estimate.replications,
            "observations_drawn": e.observations_drawn,
            "observations_processed": e.observations_processed,
            "likelihood_evals": e.estimate.total_likelihood_evals,
        })
    };
    write_json(
        &cfg.out_dir.join(STREAM_SUMMARY_FILE),
        &json!({
            "config": cfg.echo(),
            "master_seed": cfg.seed,
            "n_max": report.n_max,
            "alpha": alpha,
            "batch_size": report.batch_size,
            "expected_cost_ratio": report.expected_cost_ratio,
            "realized_cost_ratio": report.realized_cost_ratio,
            "cost_matched": cost_matched,
            "debiased": scheme(&report.debiased),
            "baseline": scheme(&report.baseline),
        }),
    )?;
    Ok(StreamOutcome {
        report,
        alpha,
        cost_matched,
    })
}

