//! Unbiased estimation of posterior expectations from randomly truncated
//! paths of partial posteriors.
//!
//! The estimator evaluates a functional on a ladder of nested data subsets
//! `D_1 ⊂ D_2 ⊂ … ⊂ D_L` of geometrically increasing size, stops at a random
//! level `T`, and combines the partial results with a weighted telescoping sum
//! whose expectation equals the full-data value. Averaging independent
//! replicates drives the variance down as `1/R` while the average cost per
//! replicate stays sub-linear in the dataset size.
//!
//! Modules:
//!
//! * [`schedule`] batch ladders, truncation laws, cost and variance bounds,
//!   tuning of the truncation exponent.
//! * [`estimator`] the telescoping estimator, replication loop and aggregation.
//! * [`sampler`] adaptive random-walk Metropolis for providers without closed forms.
//! * [`models`] expectation providers and synthetic data generators.
//! * [`streaming`] bounded-budget debiasing over an unbounded observation stream.

pub mod estimator;
pub mod models;
pub mod sampler;
pub mod schedule;
pub mod seed;
pub mod stats;
pub mod streaming;

pub use estimator::{
    convergence_trace, exact_expectation_oracle, run_debias, run_replication, second_moment_exact,
    telescoping_estimate, DebiasEstimate, DebiasReplicate, EstimatorError, RunOptions, StopRule,
};
pub use models::{ExpectationProvider, ProviderError};
pub use schedule::{
    BatchSchedule, ConvergenceFit, CostModel, ScheduleError, TruncationDistribution,
};
