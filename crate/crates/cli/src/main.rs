use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use debias_cli::config::{parse_override, ExperimentConfig};
use debias_cli::{commands, exit, CliError};
use serde_json::json;

const KEYS_HELP: &str = "\
Configuration keys (config file lines `key = value`, or `--set key=value`):
  model              loggaussian | logistic | rff_regression | gaussian_mean
  data               dataset path (written by generate, read by the others)
  out_dir            directory for result files [.]
  seed               master seed [1]
  n, data_seed       rows and seed for generate [data_seed = seed]
  gen.<param>        generator parameter, e.g. gen.sigma2=2, gen.cov=1;0.5;0.5;2
  min_batch, ratio   schedule a and ratio [8, 2]
  total              N; rounded down to the largest a·ratio^k [dataset size]
  alpha              truncation exponent, or auto [auto]
  beta, beta_fit     decay exponent, or a pilot.json to read it from
  beta_margin        subtracted from beta before tuning [0.1]
  alpha_grid         points on the emitted tradeoff curve [200]
  iterations, burn_in, step, adapt, thin   sampler settings [500, 100, 1, true, 1]
  replications       R [100]
  epsilon, max_replications   stop once stderr <= epsilon [cap 100000]
  level_cap, cap_policy       largest subset per level; abort | truncate [abort]
  workers            worker threads; DEBIAS_WORKERS overrides
  component          reported output index (weight index for logistic) [0]
  likelihood_cov, prior_mean, prior_cov   Gaussian mean model [data cov, 0, I]
  lambda, rff_features, spectral_std, test_points   RFF model [1, header m, header, 1000]
  pilot_levels, pilot_repeats, pilot_reference     pilot [6, 30, largest | full]
  repeats, convergence_sizes                       convergence table [50, schedule]
  n_max              stream budget [16384]

Exit codes: 0 success, 2 usage or config error, 3 numerical failure, 4 budget or tolerance cap.";

#[derive(Parser)]
#[command(name = "debias", version, about = "Debiased posterior expectations from partial-posterior paths", after_help = KEYS_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Config file of `key = value` lines.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE", global = true, value_parser = parse_override)]
    overrides: Vec<(String, String)>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Generate,
    /// Fit the squared-difference decay on the first schedule levels.
    Pilot,
    /// Choose the truncation exponent and write the tradeoff curve.
    Tune,
    /// Run the debiased estimator.
    Run,
    /// Tabulate partial-posterior expectations against subset size.
    Convergence,
    /// Compare debiased and constant-batch estimates on a stream.
    Stream,
}

fn execute(cli: &Cli) -> Result<serde_json::Value, CliError> {
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
    Ok(match cli.command {
        Command::Generate => serde_json::to_value(commands::cmd_generate(&cfg)?)?,
        Command::Pilot => serde_json::to_value(commands::cmd_pilot(&cfg)?)?,
        Command::Tune => {
            let t = commands::cmd_tune(&cfg)?;
            json!({
                "alpha": t.alpha,
                "work_variance": t.work_variance,
                "fitted_beta": t.fitted_beta,
                "beta_used": t.beta_used,
                "total": t.total,
                "requested_total": t.requested_total,
                "levels": t.levels,
            })
        }
        Command::Run => {
            let r = commands::cmd_run(&cfg)?;
            if let Some(n) = r.requested_total {
                eprintln!("note: N={n} is not a·ratio^k; using the first {} observations", r.sizes.last().unwrap());
            }
            json!({
                "run_id": r.run_id,
                "functional": r.functional,
                "mean": r.estimate.mean,
                "stderr": r.estimate.stderr,
                "ci95": r.estimate.ci95(),
                "R": r.estimate.replications,
                "total_evals": r.estimate.total_likelihood_evals,
                "alpha": r.alpha,
                "summary": r.summary_path,
            })
        }
        Command::Convergence => serde_json::to_value(commands::cmd_convergence(&cfg)?)?,
        Command::Stream => {
            let s = commands::cmd_stream(&cfg)?;
            json!({
                "alpha": s.alpha,
                "batch_size": s.report.batch_size,
                "cost_matched": s.cost_matched,
                "debiased": { "mean": s.report.debiased.estimate.mean, "ci95": s.report.debiased.estimate.ci95() },
                "baseline": { "mean": s.report.baseline.estimate.mean, "ci95": s.report.baseline.estimate.ci95() },
            })
        }
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE as u8 } else { exit::OK as u8 });
        }
    };
    match execute(&cli) {
        Ok(value) => {
            println!("{}", serde_json::to_string_pretty(&value).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
