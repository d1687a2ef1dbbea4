//! Flat `key = value` experiment configuration.
//!
//! A config file holds one `key = value` pair per line; `#` starts a comment.
//! Command-line `--set key=value` pairs override the file, and the
//! `DEBIAS_WORKERS` environment variable overrides `workers`. Lists are
//! `;`-separated. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use debias_core::estimator::CapPolicy;
use debias_core::models::DatasetKind;
use debias_core::sampler::SamplerConfig;
use debias_core::StopRule;

use crate::error::CliError;

pub const WORKERS_ENV: &str = "DEBIAS_WORKERS";

/// Keys that change how a run executes but not what it computes; they are
/// left out of the configuration echoed into output files.
const EXECUTION_KEYS: &[&str] = &["workers", "out_dir"];

/// Reference point for pilot squared differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PilotReference {
    /// The largest pilot level.
    LargestLevel,
    /// The expectation on all `N` observations.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaSetting {
    Fixed(f64),
    /// Tuned from a decay fit (`beta`, `beta_fit` or an inline pilot).
    Auto,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Model kind; taken from the dataset header when absent.
    pub model: Option<DatasetKind>,
    pub data: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,

    /// Rows to generate.
    pub n: Option<usize>,
    pub data_seed: u64,
    /// Generator parameters (`gen.<name>` keys).
    pub gen: BTreeMap<String, String>,

    pub min_batch: usize,
    pub ratio: usize,
    /// Requested `N`; defaults to the dataset size. Rounded down to the largest
    /// admissible value.
    pub total: Option<usize>,
    pub alpha: AlphaSetting,
    pub beta: Option<f64>,
    pub beta_fit: Option<PathBuf>,
    pub beta_margin: f64,
    pub alpha_grid: usize,

    pub sampler: SamplerConfig,
    pub stop: StopRule,
    pub level_cap: Option<usize>,
    pub cap_policy: CapPolicy,
    pub workers: Option<usize>,

    pub component: usize,
    pub likelihood_cov: Option<Vec<f64>>,
    pub prior_mean: Option<Vec<f64>>,
    pub prior_cov: Option<Vec<f64>>,
    pub lambda: f64,
    pub rff_features: Option<usize>,
    pub spectral_std: Option<f64>,
    pub test_points: usize,

    pub pilot_levels: usize,
    pub pilot_repeats: usize,
    pub pilot_reference: PilotReference,

    pub repeats: usize,
    pub convergence_sizes: Option<Vec<usize>>,

    pub n_max: Option<usize>,

    echo: BTreeMap<String, String>,
}

/// Parses a config file body.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key = value, got '{raw}'", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn parse_override(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got '{s}'"))
}

struct Resolver {
    map: BTreeMap<String, String>,
    echo: BTreeMap<String, String>,
}

impl Resolver {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        v.parse()
            .map_err(|e| CliError::Config(format!("{key}: cannot parse '{v}': {e}")))
    }

    fn opt<T: FromStr + Display>(&mut self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        match self.take(key) {
            None => Ok(None),
            Some(v) => {
                let parsed: T = Self::parse(key, &v)?;
                self.echo.insert(key.into(), parsed.to_string());
                Ok(Some(parsed))
            }
        }
    }

    fn or<T: FromStr + Display>(&mut self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let v = self.opt(key)?.unwrap_or(default);
        self.echo.insert(key.into(), v.to_string());
        Ok(v)
    }

    fn list<T: FromStr + Display>(&mut self, key: &str) -> Result<Option<Vec<T>>, CliError>
    where
        T::Err: Display,
    {
        match self.take(key) {
            None => Ok(None),
            Some(v) => {
                let items = v
                    .split(';')
                    .map(|s| Self::parse::<T>(key, s.trim()))
                    .collect::<Result<Vec<_>, _>>()?;
                let text = items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
                self.echo.insert(key.into(), text);
                Ok(Some(items))
            }
        }
    }
}

impl ExperimentConfig {
    /// Loads `path` (if any), applies `overrides` and the worker environment variable.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut map = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(CliError::io(format!("reading {}", p.display())))?;
                parse_pairs(&text)?
            }
            None => BTreeMap::new(),
        };
        for (k, v) in overrides {
            map.insert(k.clone(), v.clone());
        }
        if let Ok(w) = std::env::var(WORKERS_ENV) {
            if !w.trim().is_empty() {
                map.insert("workers".into(), w);
            }
        }
        Self::from_map(map)
    }

    pub fn from_map(map: BTreeMap<String, String>) -> Result<Self, CliError> {
        let mut r = Resolver {
            map,
            echo: BTreeMap::new(),
        };
        let model = r.opt::<String>("model")?.map(|s| s.parse()).transpose()?;
        let seed = r.or("seed", 1u64)?;
        let data = r.opt::<String>("data")?.map(PathBuf::from);
        let out_dir = PathBuf::from(r.or("out_dir", ".".to_string())?);
        let n = r.opt("n")?;
        let data_seed = r.or("data_seed", seed)?;
        let gen_keys: Vec<String> = r.map.keys().filter(|k| k.starts_with("gen.")).cloned().collect();
        let mut gen = BTreeMap::new();
        for k in gen_keys {
            let v = r.take(&k).expect("listed");
            r.echo.insert(k.clone(), v.clone());
            gen.insert(k["gen.".len()..].to_string(), v);
        }

        let min_batch = r.or("min_batch", 8usize)?;
        let ratio = r.or("ratio", 2usize)?;
        let total = r.opt("total")?;
        let alpha = match r.or("alpha", "auto".to_string())?.as_str() {
            "auto" => AlphaSetting::Auto,
            v => {
                let a: f64 = Resolver::parse("alpha", v)?;
                if !(a > 0.0 && a.is_finite()) {
                    return Err(CliError::Config(format!("alpha must be positive or 'auto', got {a}")));
                }
                AlphaSetting::Fixed(a)
            }
        };
        let beta = r.opt("beta")?;
        let beta_fit = r.opt::<String>("beta_fit")?.map(PathBuf::from);
        let beta_margin = r.or("beta_margin", 0.1f64)?;
        let alpha_grid = r.or("alpha_grid", 200usize)?;

        let defaults = SamplerConfig::default();
        let sampler = SamplerConfig {
            iterations: r.or("iterations", defaults.iterations)?,
            burn_in: r.or("burn_in", defaults.burn_in)?,
            initial_step: r.or("step", defaults.initial_step)?,
            adapt: r.or("adapt", defaults.adapt)?,
            thin: r.or("thin", defaults.thin)?,
        };
        sampler
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;

        let epsilon: Option<f64> = r.opt("epsilon")?;
        let stop = match epsilon {
            Some(epsilon) => StopRule::Tolerance {
                epsilon,
                max_replications: r.or("max_replications", 100_000usize)?,
            },
            None => StopRule::Replications(r.or("replications", 100usize)?),
        };
        stop.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let level_cap = r.opt("level_cap")?;
        let cap_policy = match r.or("cap_policy", "abort".to_string())?.as_str() {
            "abort" => CapPolicy::Abort,
            "truncate" => CapPolicy::Truncate,
            v => return Err(CliError::Config(format!("cap_policy must be abort or truncate, got '{v}'"))),
        };
        let workers: Option<usize> = r.opt("workers")?;
        if workers == Some(0) {
            return Err(CliError::Config("workers must be at least 1".into()));
        }

        let component = r.or("component", 0usize)?;
        let likelihood_cov = r.list("likelihood_cov")?;
        let prior_mean = r.list("prior_mean")?;
        let prior_cov = r.list("prior_cov")?;
        let lambda = r.or("lambda", 1.0f64)?;
        let rff_features = r.opt("rff_features")?;
        let spectral_std = r.opt("spectral_std")?;
        let test_points = r.or("test_points", 1000usize)?;

        let pilot_levels = r.or("pilot_levels", 6usize)?;
        let pilot_repeats = r.or("pilot_repeats", 30usize)?;
        let pilot_reference = match r.or("pilot_reference", "largest".to_string())?.as_str() {
            "largest" => PilotReference::LargestLevel,
            "full" => PilotReference::Full,
            v => return Err(CliError::Config(format!("pilot_reference must be largest or full, got '{v}'"))),
        };
        let repeats = r.or("repeats", 50usize)?;
        let convergence_sizes = r.list("convergence_sizes")?;
        let n_max = r.opt("n_max")?;

        if let Some(k) = r.map.keys().next() {
            return Err(CliError::Config(format!("unknown key '{k}'")));
        }
        if lambda <= 0.0 {
            return Err(CliError::Config(format!("lambda must be positive, got {lambda}")));
        }
        if !(0.0..1.0).contains(&beta_margin) {
            return Err(CliError::Config(format!("beta_margin must lie in [0, 1), got {beta_margin}")));
        }
        if repeats == 0 || pilot_repeats == 0 || test_points == 0 || alpha_grid < 2 {
            return Err(CliError::Config(
                "repeats, pilot_repeats and test_points must be at least 1 and alpha_grid at least 2".into(),
            ));
        }
        let mut echo = r.echo;
        for k in EXECUTION_KEYS {
            echo.remove(*k);
        }
        Ok(Self {
            model,
            data,
            out_dir,
            seed,
            n,
            data_seed,
            gen,
            min_batch,
            ratio,
            total,
            alpha,
            beta,
            beta_fit,
            beta_margin,
            alpha_grid,
            sampler,
            stop,
            level_cap,
            cap_policy,
            workers,
            component,
            likelihood_cov,
            prior_mean,
            prior_cov,
            lambda,
            rff_features,
            spectral_std,
            test_points,
            pilot_levels,
            pilot_repeats,
            pilot_reference,
            repeats,
            convergence_sizes,
            n_max,
            echo,
        })
    }

    /// Resolved configuration without execution-only keys.
    pub fn echo(&self) -> &BTreeMap<String, String> {
        &self.echo
    }

    pub(crate) fn record(&mut self, key: &str, value: impl ToString) {
        self.echo.insert(key.into(), value.to_string());
    }

    pub fn replications(&self) -> usize {
        match self.stop {
            StopRule::Replications(r) => r,
            StopRule::Tolerance { max_replications, .. } => max_replications,
        }
    }
}
