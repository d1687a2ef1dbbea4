//! Adaptive random-walk Metropolis.
//!
//! Isotropic Gaussian proposals. During burn-in the log step size follows a
//! Robbins–Monro recursion toward a 0.234 acceptance rate; it is frozen for the
//! retained iterations so those form a time-homogeneous Metropolis chain.

use rand_distr::{Distribution, StandardNormal};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_from;

const TARGET_ACCEPTANCE: f64 = 0.234;
const MAX_CONSECUTIVE_REJECTIONS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("log target is not finite at the initial point ({0})")]
    NonFiniteTarget(f64),
    #[error("chain rejected {0} consecutive proposals")]
    DivergentChain(usize),
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Iterations after burn-in.
    pub iterations: usize,
    pub burn_in: usize,
    /// Proposal standard deviation at the start of burn-in.
    pub initial_step: f64,
    pub adapt: bool,
    pub thin: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            burn_in: 100,
            initial_step: 1.0,
            adapt: true,
            thin: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.iterations == 0 {
            return Err(SamplerError::InvalidConfig("iterations must be at least 1".into()));
        }
        if !(self.initial_step.is_finite() && self.initial_step > 0.0) {
            return Err(SamplerError::InvalidConfig(format!(
                "initial_step must be positive, got {}",
                self.initial_step
            )));
        }
        if self.thin == 0 {
            return Err(SamplerError::InvalidConfig("thin must be at least 1".into()));
        }
        Ok(())
    }

    /// Iterations per chain including burn-in; the `M` of the cost model.
    pub fn chain_length(&self) -> usize {
        self.iterations + self.burn_in
    }

    pub fn with_step(self, initial_step: f64) -> Self {
        Self { initial_step, ..self }
    }
}

/// Retained draws of a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainResult {
    dim: usize,
    samples: Vec<f64>,
    /// Accepted proposals after burn-in.
    pub accepted: usize,
    /// Proposals after burn-in.
    pub proposals: usize,
    pub acceptance_rate: f64,
    pub final_step: f64,
}

impl ChainResult {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    pub fn samples(&self) -> impl Iterator<Item = &[f64]> {
        self.samples.chunks_exact(self.dim)
    }

    /// Trace of one coordinate.
    pub fn coordinate(&self, j: usize) -> Vec<f64> {
        self.samples().map(|s| s[j]).collect()
    }
}

pub fn adaptive_rwm<F>(
    mut log_target: F,
    init: &[f64],
    config: &SamplerConfig,
    seed: u64,
) -> Result<ChainResult, SamplerError>
where
    F: FnMut(&[f64]) -> f64,
{
    config.validate()?;
    let dim = init.len();
    if dim == 0 {
        return Err(SamplerError::InvalidConfig("empty initial point".into()));
    }
    let mut current = init.to_vec();
    let mut current_lp = log_target(&current);
    if !current_lp.is_finite() {
        return Err(SamplerError::NonFiniteTarget(current_lp));
    }
    let mut rng = rng_from(seed);
    let mut log_step = config.initial_step.ln();
    let mut proposal = vec![0.0; dim];
    let mut samples = Vec::with_capacity(config.iterations.div_ceil(config.thin) * dim);
    let mut accepted = 0;
    let mut rejected_run = 0;
    let total = config.burn_in + config.iterations;
    for i in 0..total {
        let step = log_step.exp();
        for (p, c) in proposal.iter_mut().zip(&current) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *p = c + step * z;
        }
        let proposal_lp = log_target(&proposal);
        let log_ratio = proposal_lp - current_lp;
        let u: f64 = rng.random();
        let accept = proposal_lp.is_finite() && (log_ratio >= 0.0 || u.ln() < log_ratio);
        if accept {
            std::mem::swap(&mut current, &mut proposal);
            current_lp = proposal_lp;
            rejected_run = 0;
        } else {
            rejected_run += 1;
            if rejected_run > MAX_CONSECUTIVE_REJECTIONS {
                return Err(SamplerError::DivergentChain(rejected_run));
            }
        }
        if i < config.burn_in {
            if config.adapt {
                let gain = 1.0 / ((i + 1) as f64).powf(0.6);
                let hit = if accept { 1.0 } else { 0.0 };
                log_step += gain * (hit - TARGET_ACCEPTANCE);
            }
        } else {
            accepted += usize::from(accept);
            if (i - config.burn_in) % config.thin == 0 {
                samples.extend_from_slice(&current);
            }
        }
    }
    Ok(ChainResult {
        dim,
        samples,
        accepted,
        proposals: config.iterations,
        acceptance_rate: accepted as f64 / config.iterations as f64,
        final_step: log_step.exp(),
    })
}

/// Average of `functional` over the retained draws.
pub fn empirical_expectation<F: Fn(&[f64]) -> f64>(chain: &ChainResult, functional: F) -> f64 {
    chain.samples().map(functional).sum::<f64>() / chain.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::batch_means_mcse;

    fn std_normal(x: &[f64]) -> f64 {
        -0.5 * x.iter().map(|v| v * v).sum::<f64>()
    }

    #[test]
    fn standard_normal_moments() {
        let cfg = SamplerConfig {
            iterations: 100_000,
            burn_in: 1_000,
            ..Default::default()
        };
        let chain = adaptive_rwm(std_normal, &[0.0], &cfg, 11).unwrap();
        let mean = empirical_expectation(&chain, |x| x[0]);
        let second = empirical_expectation(&chain, |x| x[0] * x[0]);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((second - mean * mean - 1.0).abs() < 0.05, "var {}", second - mean * mean);
        assert!((second - 1.0).abs() < 0.05);
        assert!((0.1..=0.5).contains(&chain.acceptance_rate), "{}", chain.acceptance_rate);
        let trace = chain.coordinate(0);
        let mcse = batch_means_mcse(&trace).unwrap();
        assert!(mean.abs() < 4.0 * mcse.max(0.005));
    }

    #[test]
    fn correlated_gaussian_covariance() {
        // Σ = [[1, 0.8], [0.8, 2]]
        let (s11, s12, s22) = (1.0, 0.8, 2.0);
        let det = s11 * s22 - s12 * s12;
        let (p11, p12, p22) = (s22 / det, -s12 / det, s11 / det);
        let lp = |x: &[f64]| -0.5 * (p11 * x[0] * x[0] + 2.0 * p12 * x[0] * x[1] + p22 * x[1] * x[1]);
        let cfg = SamplerConfig {
            iterations: 200_000,
            burn_in: 2_000,
            ..Default::default()
        };
        let chain = adaptive_rwm(lp, &[0.0, 0.0], &cfg, 3).unwrap();
        let m0 = empirical_expectation(&chain, |x| x[0]);
        let m1 = empirical_expectation(&chain, |x| x[1]);
        let c00 = empirical_expectation(&chain, |x| (x[0] - m0).powi(2));
        let c01 = empirical_expectation(&chain, |x| (x[0] - m0) * (x[1] - m1));
        let c11 = empirical_expectation(&chain, |x| (x[1] - m1).powi(2));
        let err = ((c00 - s11).powi(2) + 2.0 * (c01 - s12).powi(2) + (c11 - s22).powi(2)).sqrt();
        let norm = (s11 * s11 + 2.0 * s12 * s12 + s22 * s22).sqrt();
        assert!(err / norm < 0.10, "relative Frobenius error {}", err / norm);
    }

    #[test]
    fn degenerate_chain_returns_near_init() {
        let cfg = SamplerConfig {
            iterations: 1,
            burn_in: 0,
            initial_step: 1e-12,
            adapt: false,
            thin: 1,
        };
        let chain = adaptive_rwm(std_normal, &[0.3, -0.2], &cfg, 1).unwrap();
        assert_eq!(chain.len(), 1);
        assert!((chain.sample(0)[0] - 0.3).abs() < 1e-9);
        assert!((chain.sample(0)[1] + 0.2).abs() < 1e-9);
    }

    #[test]
    fn expectation_of_constant_and_single_sample() {
        let cfg = SamplerConfig {
            iterations: 1,
            burn_in: 0,
            ..Default::default()
        };
        let chain = adaptive_rwm(std_normal, &[0.5], &cfg, 2).unwrap();
        assert_eq!(empirical_expectation(&chain, |x| x[0]), chain.sample(0)[0]);
        assert_eq!(empirical_expectation(&chain, |_| 4.25), 4.25);
    }

    #[test]
    fn errors() {
        let cfg = SamplerConfig::default();
        assert!(matches!(
            adaptive_rwm(|_| f64::NEG_INFINITY, &[0.0], &cfg, 1),
            Err(SamplerError::NonFiniteTarget(_))
        ));
        // only the starting point has finite density
        let spike = |x: &[f64]| if x[0] == 0.25 { 0.0 } else { f64::NEG_INFINITY };
        let cfg = SamplerConfig {
            iterations: 20_000,
            burn_in: 0,
            adapt: false,
            ..Default::default()
        };
        assert!(matches!(
            adaptive_rwm(spike, &[0.25], &cfg, 1),
            Err(SamplerError::DivergentChain(_))
        ));
        let bad = SamplerConfig { iterations: 0, ..Default::default() };
        assert!(adaptive_rwm(std_normal, &[0.0], &bad, 1).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = SamplerConfig::default();
        let a = adaptive_rwm(std_normal, &[1.0, 2.0], &cfg, 77).unwrap();
        let b = adaptive_rwm(std_normal, &[1.0, 2.0], &cfg, 77).unwrap();
        assert_eq!(a, b);
        let c = adaptive_rwm(std_normal, &[1.0, 2.0], &cfg, 78).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn thinning_keeps_every_kth() {
        let cfg = SamplerConfig {
            iterations: 10,
            burn_in: 5,
            thin: 3,
            ..Default::default()
        };
        let chain = adaptive_rwm(std_normal, &[0.0], &cfg, 4).unwrap();
        assert_eq!(chain.len(), 4);
        assert_eq!(cfg.chain_length(), 15);
    }
}
