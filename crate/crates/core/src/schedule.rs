//! Batch ladders, truncation laws, cost accounting and the tuning of the
//! truncation exponent.
//!
//! A [`BatchSchedule`] is the ladder `n_t = a·r^{t-1}`, `t = 1..L`, ending at
//! the dataset size `N`. A [`TruncationDistribution`] puts mass
//! `p_t ∝ 2^{-αt}` on the levels. Larger `α` makes long paths rarer, which
//! cuts the expected cost and raises the variance; [`tune_alpha`] balances the
//! two by minimizing their product.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Search interval margin for the truncation exponent: `α ∈ (MARGIN, β − MARGIN)`.
pub const ALPHA_MARGIN: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("minimum batch size must be at least 1")]
    ZeroMinBatch,
    #[error("common ratio must be an integer >= 2, got {0}")]
    InvalidRatio(usize),
    #[error("N={n} is not of the form a·ratio^k with a={a}, ratio={ratio}")]
    NonIntegralLevels { a: usize, ratio: usize, n: usize },
    #[error("truncation exponent must be positive and finite, got {0}")]
    NonPositiveAlpha(f64),
    #[error("truncation distribution needs at least one level")]
    EmptySupport,
    #[error("truncation probability underflows at level {level} for alpha={alpha}")]
    VanishingProbability { alpha: f64, level: usize },
    #[error("truncation distribution has {dist} levels but the schedule has {schedule}")]
    LengthMismatch { dist: usize, schedule: usize },
    #[error("chain length M must be at least 1")]
    ZeroChainLength,
    #[error("beta={0} leaves no admissible alpha in (0.01, beta-0.01); the variance bound has no finite work-variance minimum")]
    NoFiniteMinimum(f64),
    #[error("convergence fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("convergence fit input must be positive and finite")]
    NonPositiveInput,
    #[error("sizes and squared differences differ in length ({sizes} vs {diffs})")]
    FitLengthMismatch { sizes: usize, diffs: usize },
    #[error("degenerate convergence data: the decay exponent is undefined (fitted beta={beta})")]
    DegenerateInput { beta: f64 },
}

/// Geometric ladder of nested subset sizes `a, a·r, …, a·r^{L-1} = N`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSchedule {
    min_batch: usize,
    ratio: usize,
    sizes: Vec<usize>,
}

impl BatchSchedule {
    pub fn geometric(min_batch: usize, ratio: usize, total: usize) -> Result<Self, ScheduleError> {
        if min_batch == 0 {
            return Err(ScheduleError::ZeroMinBatch);
        }
        if ratio < 2 {
            return Err(ScheduleError::InvalidRatio(ratio));
        }
        let not_integral = ScheduleError::NonIntegralLevels {
            a: min_batch,
            ratio,
            n: total,
        };
        let mut sizes = vec![min_batch];
        let mut n = min_batch;
        while n < total {
            n = n.checked_mul(ratio).ok_or(not_integral.clone())?;
            sizes.push(n);
        }
        if n != total {
            return Err(not_integral);
        }
        Ok(Self {
            min_batch,
            ratio,
            sizes,
        })
    }

    /// Largest `a·ratio^k ≤ total`, or `None` when `total < a`.
    pub fn largest_admissible(min_batch: usize, ratio: usize, total: usize) -> Option<usize> {
        if min_batch == 0 || ratio < 2 || total < min_batch {
            return None;
        }
        let mut n = min_batch;
        while let Some(next) = n.checked_mul(ratio) {
            if next > total {
                break;
            }
            n = next;
        }
        Some(n)
    }

    pub fn min_batch(&self) -> usize {
        self.min_batch
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    pub fn levels(&self) -> usize {
        self.sizes.len()
    }

    pub fn total(&self) -> usize {
        *self.sizes.last().expect("schedule is never empty")
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Size of level `t` (1-based).
    pub fn size(&self, level: usize) -> usize {
        self.sizes[level - 1]
    }

    /// Running totals `Σ_{s≤t} n_s`.
    pub fn cumulative_sizes(&self) -> Vec<u64> {
        self.sizes
            .iter()
            .scan(0u64, |acc, &n| {
                *acc += n as u64;
                Some(*acc)
            })
            .collect()
    }

    /// A copy restricted to the first `levels` levels.
    pub fn prefix(&self, levels: usize) -> Self {
        let levels = levels.clamp(1, self.levels());
        Self {
            min_batch: self.min_batch,
            ratio: self.ratio,
            sizes: self.sizes[..levels].to_vec(),
        }
    }
}

/// Law of the truncation level `T` on `{1, …, L}` with `P[T = t] ∝ 2^{-αt}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationDistribution {
    alpha: f64,
    probs: Vec<f64>,
    tails: Vec<f64>,
    normalizer: f64,
}

impl TruncationDistribution {
    /// Geometric truncation law. `α > 1` is accepted (see [`Self::exceeds_unit_alpha`]).
    pub fn geometric(alpha: f64, levels: usize) -> Result<Self, ScheduleError> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(ScheduleError::NonPositiveAlpha(alpha));
        }
        if levels == 0 {
            return Err(ScheduleError::EmptySupport);
        }
        // weights relative to the first level: 2^{-α(t-1)}
        let weights: Vec<f64> = (0..levels).map(|k| (-alpha * k as f64).exp2()).collect();
        if let Some(k) = weights.iter().position(|&w| w <= f64::MIN_POSITIVE) {
            return Err(ScheduleError::VanishingProbability {
                alpha,
                level: k + 1,
            });
        }
        let mut tails = vec![0.0; levels];
        let mut acc = 0.0;
        for k in (0..levels).rev() {
            acc += weights[k];
            tails[k] = acc;
        }
        let total = acc;
        let probs = weights.iter().map(|w| w / total).collect();
        tails.iter_mut().for_each(|x| *x /= total);
        tails[0] = 1.0;
        Ok(Self {
            alpha,
            probs,
            tails,
            normalizer: (-alpha).exp2() * total,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn levels(&self) -> usize {
        self.probs.len()
    }

    /// `P[T = t]` for `t = 1..L`.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// `P[T ≥ t]` for `t = 1..L`.
    pub fn tails(&self) -> &[f64] {
        &self.tails
    }

    /// `Z_α = Σ_{t=1}^L 2^{-αt}`.
    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    /// The cost and variance analysis assumes `α ≤ 1`.
    pub fn exceeds_unit_alpha(&self) -> bool {
        self.alpha > 1.0
    }

    /// Inverse-CDF draw of a level in `1..=L`: with `U ~ Uniform[0,1)`,
    /// `T = #{t : U < P[T ≥ t]}`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.tails.partition_point(|&tail| u < tail).max(1)
    }
}

/// Closed-form tail `P[T ≥ t] = (2^{-α(t-1)} - 2^{-αL}) / (1 - 2^{-αL})`.
pub fn geometric_tail(alpha: f64, levels: usize, level: usize) -> f64 {
    let floor = (-alpha * levels as f64).exp2();
    ((-alpha * (level as f64 - 1.0)).exp2() - floor) / (1.0 - floor)
}

/// Work accounting: `M` iterations per level (burn-in included), each touching
/// every datum of the level `per_point_cost` times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    chain_length: usize,
    per_point_cost: u64,
}

impl CostModel {
    pub fn new(chain_length: usize) -> Result<Self, ScheduleError> {
        Self::with_per_point_cost(chain_length, 1)
    }

    pub fn with_per_point_cost(chain_length: usize, per_point_cost: u64) -> Result<Self, ScheduleError> {
        if chain_length == 0 {
            return Err(ScheduleError::ZeroChainLength);
        }
        Ok(Self {
            chain_length,
            per_point_cost,
        })
    }

    pub fn chain_length(&self) -> usize {
        self.chain_length
    }

    pub fn per_point_cost(&self) -> u64 {
        self.per_point_cost
    }

    /// Likelihood evaluations for one level of `n` points.
    pub fn level_cost(&self, n: usize) -> u64 {
        self.chain_length as u64 * self.per_point_cost * n as u64
    }

    /// `M · Σ_{s≤t} n_s` for a path truncated at `t`.
    pub fn path_cost(&self, schedule: &BatchSchedule, truncation: usize) -> u64 {
        schedule.sizes()[..truncation]
            .iter()
            .map(|&n| self.level_cost(n))
            .sum()
    }
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            chain_length: 1,
            per_point_cost: 1,
        }
    }
}

/// `E[𝓛(T)] = M · Σ_t p_t · Σ_{s≤t} n_s`.
pub fn expected_likelihood_evals(
    schedule: &BatchSchedule,
    dist: &TruncationDistribution,
    cost: &CostModel,
) -> Result<f64, ScheduleError> {
    if dist.levels() != schedule.levels() {
        return Err(ScheduleError::LengthMismatch {
            dist: dist.levels(),
            schedule: schedule.levels(),
        });
    }
    let per_path: f64 = dist
        .probs()
        .iter()
        .zip(schedule.cumulative_sizes())
        .map(|(p, cum)| p * cum as f64)
        .sum();
    Ok(per_path * cost.chain_length() as f64 * cost.per_point_cost() as f64)
}

/// Fitted decay `E|δ_t|² ≈ c · n_t^{-β}` of squared differences between
/// partial and reference expectations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceFit {
    pub c: f64,
    pub beta: f64,
    /// Sum of squared residuals in log space.
    pub residual: f64,
}

/// Least squares of `log d = log c − β log n`.
pub fn fit_beta(sizes: &[f64], squared_diffs: &[f64]) -> Result<ConvergenceFit, ScheduleError> {
    if sizes.len() != squared_diffs.len() {
        return Err(ScheduleError::FitLengthMismatch {
            sizes: sizes.len(),
            diffs: squared_diffs.len(),
        });
    }
    if sizes.len() < 3 {
        return Err(ScheduleError::TooFewPoints(sizes.len()));
    }
    if sizes
        .iter()
        .chain(squared_diffs)
        .any(|v| !(v.is_finite() && *v > 0.0))
    {
        return Err(ScheduleError::NonPositiveInput);
    }
    let xs: Vec<f64> = sizes.iter().map(|n| n.ln()).collect();
    let ys: Vec<f64> = squared_diffs.iter().map(|d| d.ln()).collect();
    let k = xs.len() as f64;
    let x_mean = xs.iter().sum::<f64>() / k;
    let y_mean = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - x_mean).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - x_mean) * (y - y_mean)).sum();
    let y_spread = ys.iter().fold(0.0f64, |m, y| m.max((y - y_mean).abs()));
    if sxx <= 0.0 || y_spread <= 1e-12 * y_mean.abs().max(1.0) {
        return Err(ScheduleError::DegenerateInput { beta: 0.0 });
    }
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let residual = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let beta = -slope;
    if beta <= 0.0 {
        return Err(ScheduleError::DegenerateInput { beta });
    }
    Ok(ConvergenceFit {
        c: intercept.exp(),
        beta,
        residual,
    })
}

/// Upper bound on `E[(φ*_T)²]` under the decay assumption.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentBound {
    pub value: f64,
    /// `α ≥ β`: the value is finite for this `L` but grows without bound as `L → ∞`.
    pub diverging: bool,
}

/// `(c·2^β/a^β)(1 − 2^{-αL}) Σ_{t=1}^L 1 / (2^{(β−α)(t−1)} − 2^{β(t−1)−αL})`.
pub fn second_moment_bound(fit: &ConvergenceFit, alpha: f64, min_batch: usize, levels: usize) -> MomentBound {
    let beta = fit.beta;
    let al = alpha * levels as f64;
    let sum: f64 = (0..levels)
        .map(|k| {
            let k = k as f64;
            1.0 / (((beta - alpha) * k).exp2() - (beta * k - al).exp2())
        })
        .sum();
    let value = fit.c * beta.exp2() / (min_batch as f64).powf(beta) * (1.0 - (-al).exp2()) * sum;
    MomentBound {
        value,
        diverging: alpha >= beta,
    }
}

/// One point of the work-variance tradeoff curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub alpha: f64,
    pub expected_cost: f64,
    pub moment_bound: f64,
    pub product: f64,
}

pub fn tradeoff_point(
    schedule: &BatchSchedule,
    fit: &ConvergenceFit,
    cost: &CostModel,
    alpha: f64,
) -> Result<TradeoffPoint, ScheduleError> {
    let dist = TruncationDistribution::geometric(alpha, schedule.levels())?;
    let expected_cost = expected_likelihood_evals(schedule, &dist, cost)?;
    let moment_bound = second_moment_bound(fit, alpha, schedule.min_batch(), schedule.levels()).value;
    Ok(TradeoffPoint {
        alpha,
        expected_cost,
        moment_bound,
        product: expected_cost * moment_bound,
    })
}

/// Evaluates the tradeoff on a grid of exponents.
pub fn tradeoff_curve(
    schedule: &BatchSchedule,
    fit: &ConvergenceFit,
    cost: &CostModel,
    alphas: &[f64],
) -> Result<Vec<TradeoffPoint>, ScheduleError> {
    alphas
        .iter()
        .map(|&a| tradeoff_point(schedule, fit, cost, a))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaTuning {
    pub alpha: f64,
    pub work_variance: f64,
}

/// Golden-section minimization of expected cost × second-moment bound over
/// `α ∈ (0.01, β − 0.01)`, to a bracket width of `1e-4`.
pub fn tune_alpha(
    schedule: &BatchSchedule,
    fit: &ConvergenceFit,
    cost: &CostModel,
) -> Result<AlphaTuning, ScheduleError> {
    let lo = ALPHA_MARGIN;
    let hi = fit.beta - ALPHA_MARGIN;
    if !(hi > lo) {
        return Err(ScheduleError::NoFiniteMinimum(fit.beta));
    }
    let objective = |a: f64| tradeoff_point(schedule, fit, cost, a).map(|p| p.product);
    let (alpha, work_variance) = golden_section(lo, hi, 1e-4, objective)?;
    Ok(AlphaTuning {
        alpha,
        work_variance,
    })
}

fn golden_section<F>(mut lo: f64, mut hi: f64, tol: f64, f: F) -> Result<(f64, f64), ScheduleError>
where
    F: Fn(f64) -> Result<f64, ScheduleError>,
{
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2)?;
        }
    }
    let x = 0.5 * (lo + hi);
    Ok((x, f(x)?))
}

/// The closed-form selection expression
/// `a^α (1 − 2^{-α}) / ((1 − 2^{α−1})(1 − 2^{α−β})) · N^{1−α}`, kept for
/// comparison with [`tune_alpha`]. It is stated as an argmax; see
/// [`literal_alpha`].
pub fn literal_alpha_objective(alpha: f64, beta: f64, min_batch: usize, total: usize) -> f64 {
    (min_batch as f64).powf(alpha) * (1.0 - (-alpha).exp2())
        / ((1.0 - (alpha - 1.0).exp2()) * (1.0 - (alpha - beta).exp2()))
        * (total as f64).powf(1.0 - alpha)
}

/// Grid argmax of [`literal_alpha_objective`] over `(0.01, β − 0.01)`, skipping
/// the pole at `α = 1`.
pub fn literal_alpha(beta: f64, min_batch: usize, total: usize, grid: usize) -> Option<f64> {
    let lo = ALPHA_MARGIN;
    let hi = beta - ALPHA_MARGIN;
    if !(hi > lo) || grid < 2 {
        return None;
    }
    (0..grid)
        .map(|i| lo + (hi - lo) * i as f64 / (grid - 1) as f64)
        .map(|a| (a, literal_alpha_objective(a, beta, min_batch, total)))
        .filter(|(_, v)| v.is_finite())
        .max_by(|x, y| x.1.total_cmp(&y.1))
        .map(|(a, _)| a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn geometric_schedule_examples() {
        let s = BatchSchedule::geometric(8, 2, 1 << 26).unwrap();
        assert_eq!(s.levels(), 24);
        assert_eq!(s.sizes()[0], 8);
        assert_eq!(s.total(), 1 << 26);
        assert!(s.sizes().windows(2).all(|w| w[1] == 2 * w[0]));

        let s = BatchSchedule::geometric(5, 2, 5).unwrap();
        assert_eq!(s.sizes(), &[5]);

        let s = BatchSchedule::geometric(3, 3, 81).unwrap();
        assert_eq!(s.sizes(), &[3, 9, 27, 81]);
    }

    #[test]
    fn schedule_rejects_bad_input() {
        assert_eq!(BatchSchedule::geometric(3, 1, 81), Err(ScheduleError::InvalidRatio(1)));
        assert!(matches!(
            BatchSchedule::geometric(128, 2, 10_000),
            Err(ScheduleError::NonIntegralLevels { .. })
        ));
        assert!(matches!(
            BatchSchedule::geometric(8, 2, 4),
            Err(ScheduleError::NonIntegralLevels { .. })
        ));
        assert_eq!(BatchSchedule::geometric(0, 2, 8), Err(ScheduleError::ZeroMinBatch));
        assert_eq!(BatchSchedule::largest_admissible(128, 2, 10_000), Some(8192));
        assert_eq!(BatchSchedule::largest_admissible(100, 10, 100_000), Some(100_000));
        assert_eq!(BatchSchedule::largest_admissible(100, 10, 99), None);
    }

    #[test]
    fn truncation_alpha_one_three_levels() {
        let d = TruncationDistribution::geometric(1.0, 3).unwrap();
        let expect_p = [4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0];
        let expect_tail = [1.0, 3.0 / 7.0, 1.0 / 7.0];
        for t in 0..3 {
            assert!(close(d.probs()[t], expect_p[t], 1e-15));
            assert!(close(d.tails()[t], expect_tail[t], 1e-15));
        }
        assert!(close(d.normalizer(), 7.0 / 8.0, 1e-15));
    }

    #[test]
    fn truncation_point_mass_and_bad_alpha() {
        let d = TruncationDistribution::geometric(1.0, 1).unwrap();
        assert_eq!(d.probs(), &[1.0]);
        assert_eq!(d.tails(), &[1.0]);
        let mut rng = rng_from(1);
        assert!((0..100).all(|_| d.sample(&mut rng) == 1));
        assert!(matches!(
            TruncationDistribution::geometric(0.0, 3),
            Err(ScheduleError::NonPositiveAlpha(_))
        ));
        assert!(matches!(
            TruncationDistribution::geometric(-0.5, 3),
            Err(ScheduleError::NonPositiveAlpha(_))
        ));
        assert!(TruncationDistribution::geometric(1.5, 3).unwrap().exceeds_unit_alpha());
    }

    #[test]
    fn truncation_for_small_tuning_setting_is_valid() {
        let n = BatchSchedule::largest_admissible(128, 2, 10_000).unwrap();
        let s = BatchSchedule::geometric(128, 2, n).unwrap();
        let d = TruncationDistribution::geometric(0.87, s.levels()).unwrap();
        assert!(close(d.probs().iter().sum::<f64>(), 1.0, 1e-12));
        assert!(d.probs().iter().all(|&p| p > 0.0));
    }

    #[test]
    fn sampling_frequencies_match_probs() {
        let d = TruncationDistribution::geometric(1.0, 3).unwrap();
        let mut rng = rng_from(2024);
        let draws = 1_000_000;
        let mut counts = [0usize; 3];
        for _ in 0..draws {
            counts[d.sample(&mut rng) - 1] += 1;
        }
        for t in 0..3 {
            let p = d.probs()[t];
            let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
            assert!((counts[t] as f64 - draws as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let d = TruncationDistribution::geometric(0.6, 8).unwrap();
        let a: Vec<usize> = {
            let mut rng = rng_from(99);
            (0..50).map(|_| d.sample(&mut rng)).collect()
        };
        let b: Vec<usize> = {
            let mut rng = rng_from(99);
            (0..50).map(|_| d.sample(&mut rng)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn expected_evals_examples() {
        let s = BatchSchedule::geometric(1, 2, 4).unwrap();
        let d = TruncationDistribution::geometric(1.0, 3).unwrap();
        let e = expected_likelihood_evals(&s, &d, &CostModel::default()).unwrap();
        assert!(close(e, 17.0 / 7.0, 1e-14));

        let s = BatchSchedule::geometric(37, 2, 37).unwrap();
        let d = TruncationDistribution::geometric(0.5, 1).unwrap();
        assert_eq!(expected_likelihood_evals(&s, &d, &CostModel::default()).unwrap(), 37.0);

        let d = TruncationDistribution::geometric(0.5, 2).unwrap();
        assert!(matches!(
            expected_likelihood_evals(&s, &d, &CostModel::default()),
            Err(ScheduleError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn expected_evals_ratio_two_closed_form() {
        // M·a·Σ p_t (2^t − 1)
        let s = BatchSchedule::geometric(16, 2, 16 << 9).unwrap();
        let d = TruncationDistribution::geometric(0.7, s.levels()).unwrap();
        let cost = CostModel::new(600).unwrap();
        let direct: f64 = d
            .probs()
            .iter()
            .enumerate()
            .map(|(k, p)| p * (((k + 1) as f64).exp2() - 1.0))
            .sum::<f64>()
            * 600.0
            * 16.0;
        let e = expected_likelihood_evals(&s, &d, &cost).unwrap();
        assert!(close(e, direct, 1e-9 * direct));
    }

    #[test]
    fn cost_slope_follows_one_minus_alpha() {
        let alpha = 0.5;
        let pts: Vec<(f64, f64)> = (10..=20)
            .map(|k| {
                let s = BatchSchedule::geometric(128, 2, 1 << k).unwrap();
                let d = TruncationDistribution::geometric(alpha, s.levels()).unwrap();
                let e = expected_likelihood_evals(&s, &d, &CostModel::default()).unwrap();
                ((s.total() as f64).ln(), e.ln())
            })
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        assert!(close(slope, 1.0 - alpha, 0.05), "slope {slope}");
    }

    #[test]
    fn path_cost_ledger() {
        let s = BatchSchedule::geometric(8, 2, 64).unwrap();
        let c = CostModel::new(600).unwrap();
        assert_eq!(c.path_cost(&s, 1), 600 * 8);
        assert_eq!(c.path_cost(&s, 4), 600 * (8 + 16 + 32 + 64));
        assert_eq!(CostModel::new(0), Err(ScheduleError::ZeroChainLength));
    }

    #[test]
    fn moment_bound_single_level_and_limit() {
        let fit = ConvergenceFit { c: 1.0, beta: 1.0, residual: 0.0 };
        let one = second_moment_bound(&fit, 0.5, 1, 1);
        assert!(close(one.value, 2.0, 1e-14));
        assert!(!one.diverging);

        let fit3 = ConvergenceFit { c: 3.0, beta: 1.2, residual: 0.0 };
        let one = second_moment_bound(&fit3, 0.4, 16, 1);
        assert!(close(one.value, 3.0 * 1.2f64.exp2() / 16f64.powf(1.2), 1e-14));

        let limit = 2.0 / (1.0 - (0.5f64 - 1.0).exp2());
        let big = second_moment_bound(&fit, 0.5, 1, 200);
        assert!(close(big.value, limit, 1e-9), "{} vs {limit}", big.value);
        // L=2 by hand: 2·(1 − 2^{-1})·(1/(1 − 2^{-1}) + 1/(2^{0.5} − 1))
        let two = second_moment_bound(&fit, 0.5, 1, 2);
        assert!(close(two.value, 2.0 + 1.0 / (2f64.sqrt() - 1.0), 1e-13), "{}", two.value);
    }

    #[test]
    fn moment_bound_flags_alpha_at_or_above_beta() {
        let fit = ConvergenceFit { c: 1.0, beta: 0.8, residual: 0.0 };
        let b = second_moment_bound(&fit, 0.9, 8, 4);
        assert!(b.diverging);
        assert!(b.value.is_finite() && b.value > 0.0);
        let b = second_moment_bound(&fit, 0.8, 8, 4);
        assert!(b.diverging && b.value.is_finite());
    }

    #[test]
    fn fit_beta_noiseless_recovery() {
        let sizes: Vec<f64> = (0..6).map(|k| 8.0 * (k as f64).exp2()).collect();
        let diffs: Vec<f64> = sizes.iter().map(|n| 4.0 / n).collect();
        let fit = fit_beta(&sizes, &diffs).unwrap();
        assert!(close(fit.c, 4.0, 1e-10));
        assert!(close(fit.beta, 1.0, 1e-12));
        assert!(fit.residual < 1e-20);
    }

    #[test]
    fn fit_beta_sensitivity_to_one_perturbed_point() {
        let sizes: Vec<f64> = (0..6).map(|k| 8.0 * (k as f64).exp2()).collect();
        for i in 0..sizes.len() {
            let mut diffs: Vec<f64> = sizes.iter().map(|n| 4.0 / n).collect();
            diffs[i] *= 1.01;
            let fit = fit_beta(&sizes, &diffs).unwrap();
            assert!((fit.beta - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn fit_beta_errors() {
        assert_eq!(fit_beta(&[1.0, 2.0], &[1.0, 0.5]), Err(ScheduleError::TooFewPoints(2)));
        assert_eq!(
            fit_beta(&[1.0, 2.0, 4.0], &[1.0, 1.0, 1.0]),
            Err(ScheduleError::DegenerateInput { beta: 0.0 })
        );
        assert_eq!(
            fit_beta(&[1.0, 2.0, 4.0], &[1.0, 0.0, 1.0]),
            Err(ScheduleError::NonPositiveInput)
        );
    }

    fn tuning_schedule() -> BatchSchedule {
        let n = BatchSchedule::largest_admissible(128, 2, 10_000).unwrap();
        BatchSchedule::geometric(128, 2, n).unwrap()
    }

    #[test]
    fn tune_alpha_is_bracketed_by_grid() {
        let s = tuning_schedule();
        let fit = ConvergenceFit { c: 2.0, beta: 1.0, residual: 0.0 };
        let cost = CostModel::default();
        let tuned = tune_alpha(&s, &fit, &cost).unwrap();
        let grid: Vec<f64> = (1..=19).map(|i| 0.05 * i as f64).filter(|a| *a < 0.99).collect();
        let curve = tradeoff_curve(&s, &fit, &cost, &grid).unwrap();
        let best = curve
            .iter()
            .min_by(|x, y| x.product.total_cmp(&y.product))
            .unwrap();
        assert!((tuned.alpha - best.alpha).abs() <= 0.05);
        assert!(tuned.work_variance <= best.product);
    }

    #[test]
    fn tune_alpha_scaling_laws() {
        let s = tuning_schedule();
        let fit = ConvergenceFit { c: 1.0, beta: 1.1, residual: 0.0 };
        let base = tune_alpha(&s, &fit, &CostModel::new(1).unwrap()).unwrap();
        let doubled = tune_alpha(&s, &fit, &CostModel::new(2).unwrap()).unwrap();
        assert_eq!(base.alpha, doubled.alpha);
        assert!(close(doubled.work_variance, 2.0 * base.work_variance, 1e-12 * base.work_variance));

        let scaled = tune_alpha(&s, &ConvergenceFit { c: 37.5, ..fit }, &CostModel::new(1).unwrap()).unwrap();
        assert!(close(scaled.alpha, base.alpha, 1e-12));
    }

    #[test]
    fn tune_alpha_rejects_small_beta() {
        let s = tuning_schedule();
        let fit = ConvergenceFit { c: 1.0, beta: 0.02, residual: 0.0 };
        assert_eq!(
            tune_alpha(&s, &fit, &CostModel::default()),
            Err(ScheduleError::NoFiniteMinimum(0.02))
        );
    }

    #[test]
    fn literal_objective_is_evaluable() {
        let v = literal_alpha_objective(0.5, 1.0, 128, 10_000);
        assert!(v.is_finite() && v > 0.0);
        assert!(literal_alpha(1.0, 128, 10_000, 99).is_some());
        assert!(literal_alpha(0.01, 128, 10_000, 99).is_none());
    }

    proptest! {
        #[test]
        fn tails_match_closed_form(alpha in 0.01f64..=1.0, levels in 1usize..40) {
            let d = TruncationDistribution::geometric(alpha, levels).unwrap();
            prop_assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert_eq!(d.tails()[0], 1.0);
            for t in 1..=levels {
                prop_assert!((d.tails()[t - 1] - geometric_tail(alpha, levels, t)).abs() < 1e-12);
                let direct: f64 = d.probs()[t - 1..].iter().sum();
                prop_assert!((d.tails()[t - 1] - direct).abs() < 1e-12);
                if t > 1 {
                    prop_assert!(d.tails()[t - 1] <= d.tails()[t - 2]);
                }
            }
        }

        #[test]
        fn tradeoff_is_monotone(beta in 0.3f64..1.5, levels in 3usize..16) {
            let s = BatchSchedule::geometric(4, 2, 4 << (levels - 1)).unwrap();
            let fit = ConvergenceFit { c: 1.0, beta, residual: 0.0 };
            let alphas: Vec<f64> = (1..20).map(|i| beta * i as f64 / 20.0).collect();
            let curve = tradeoff_curve(&s, &fit, &CostModel::default(), &alphas).unwrap();
            for w in curve.windows(2) {
                prop_assert!(w[1].expected_cost < w[0].expected_cost);
                prop_assert!(w[1].moment_bound > w[0].moment_bound);
            }
        }
    }
}
