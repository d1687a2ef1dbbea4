use debias_core::estimator::{random_prefix, with_workers};
use debias_core::models::gaussian::GaussianMeanModel;
use debias_core::models::SyntheticSpec;
use debias_core::models::DatasetKind;
use debias_core::sampler::{adaptive_rwm, SamplerConfig};
use debias_core::schedule::{
    expected_likelihood_evals, fit_beta, second_moment_bound, tradeoff_point, tune_alpha, BatchSchedule,
    ConvergenceFit, CostModel, TruncationDistribution,
};
use debias_core::seed::rng_from;
use debias_core::{exact_expectation_oracle, run_debias, second_moment_exact, RunOptions, StopRule};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn fit(beta: f64, c: f64) -> ConvergenceFit {
    ConvergenceFit { c, beta, residual: 0.0 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn truncation_law_is_a_distribution(alpha in 0.01f64..3.0, levels in 1usize..60) {
        let d = TruncationDistribution::geometric(alpha, levels).unwrap();
        let total: f64 = d.probs().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert_eq!(d.tails()[0], 1.0);
        for w in d.tails().windows(2) {
            prop_assert!(w[1] < w[0]);
        }
        for (t, p) in d.probs().iter().enumerate() {
            let next = d.tails().get(t + 1).copied().unwrap_or(0.0);
            prop_assert!((d.tails()[t] - next - p).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_levels_stay_in_support(alpha in 0.01f64..2.0, levels in 1usize..30, seed in any::<u64>()) {
        let d = TruncationDistribution::geometric(alpha, levels).unwrap();
        let mut rng = rng_from(seed);
        for _ in 0..100 {
            let t = d.sample(&mut rng);
            prop_assert!((1..=levels).contains(&t));
        }
    }

    #[test]
    fn deterministic_paths_are_recovered(
        alpha in 0.05f64..1.5,
        path in prop::collection::vec(-100.0f64..100.0, 1..10),
    ) {
        let d = TruncationDistribution::geometric(alpha, path.len()).unwrap();
        let mean = exact_expectation_oracle(&path, &d).unwrap();
        let scale = path.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!((mean - path[path.len() - 1]).abs() <= 1e-9 * scale);
        let m = second_moment_exact(&path, &d).unwrap();
        prop_assert!((m.formula - m.enumeration).abs() <= 1e-9 * m.enumeration.abs().max(1.0));
    }

    #[test]
    fn cost_falls_and_bound_rises_with_alpha(
        beta in 0.3f64..2.0,
        a_exp in 0u32..8,
        levels in 2usize..16,
        u in 0.05f64..0.45,
    ) {
        let a = 1usize << a_exp;
        let schedule = BatchSchedule::geometric(a, 2, a << (levels - 1)).unwrap();
        let f = fit(beta, 1.0);
        let lo = u * beta;
        let hi = (u + 0.5) * beta;
        let p_lo = tradeoff_point(&schedule, &f, &CostModel::default(), lo).unwrap();
        let p_hi = tradeoff_point(&schedule, &f, &CostModel::default(), hi).unwrap();
        prop_assert!(p_hi.expected_cost < p_lo.expected_cost);
        prop_assert!(p_hi.moment_bound > p_lo.moment_bound);
    }

    #[test]
    fn tuning_ignores_c_and_scales_with_chain_length(
        beta in 0.3f64..2.0,
        c in 1e-3f64..1e3,
        levels in 3usize..14,
    ) {
        let schedule = BatchSchedule::geometric(16, 2, 16 << (levels - 1)).unwrap();
        let one = tune_alpha(&schedule, &fit(beta, 1.0), &CostModel::default()).unwrap();
        let scaled = tune_alpha(&schedule, &fit(beta, c), &CostModel::default()).unwrap();
        prop_assert!((one.alpha - scaled.alpha).abs() < 1e-9);
        prop_assert!((scaled.work_variance / one.work_variance - c).abs() <= 1e-9 * c);
        let doubled = tune_alpha(&schedule, &fit(beta, 1.0), &CostModel::new(2).unwrap()).unwrap();
        prop_assert!((doubled.alpha - one.alpha).abs() < 1e-9);
        prop_assert!((doubled.work_variance / one.work_variance - 2.0).abs() < 1e-9);
    }

    #[test]
    fn noiseless_decay_is_recovered(c in 1e-3f64..1e3, beta in 0.1f64..3.0, k in 3usize..12) {
        let sizes: Vec<f64> = (0..k).map(|t| 8.0 * 2f64.powi(t as i32)).collect();
        let diffs: Vec<f64> = sizes.iter().map(|n| c * n.powf(-beta)).collect();
        let f = fit_beta(&sizes, &diffs).unwrap();
        prop_assert!((f.beta - beta).abs() < 1e-9);
        prop_assert!((f.c / c - 1.0).abs() < 1e-8);
    }

    #[test]
    fn prefixes_are_distinct_and_nested(population in 1usize..2000, frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let k = ((population as f64) * frac) as usize;
        let draw = random_prefix(population, k, &mut rng_from(seed));
        prop_assert_eq!(draw.len(), k);
        let mut sorted = draw.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), k);
        prop_assert!(draw.iter().all(|&i| i < population));
        let shorter = random_prefix(population, k / 2, &mut rng_from(seed));
        prop_assert_eq!(&draw[..k / 2], &shorter[..]);
    }
}

#[test]
fn bound_approaches_its_large_level_limit() {
    let f = fit(1.0, 1.0);
    let limit = 2.0 / (1.0 - 2f64.powf(-0.5));
    let v = second_moment_bound(&f, 0.5, 1, 200).value;
    assert!((v - limit).abs() < 1e-9 * limit, "{v} vs {limit}");
}

#[test]
fn expected_evals_match_small_example() {
    let schedule = BatchSchedule::geometric(1, 2, 4).unwrap();
    let d = TruncationDistribution::geometric(1.0, 3).unwrap();
    let e = expected_likelihood_evals(&schedule, &d, &CostModel::default()).unwrap();
    assert!((e - 17.0 / 7.0).abs() < 1e-12);
}

#[test]
fn debiased_runs_do_not_depend_on_worker_count() {
    let data = SyntheticSpec::new(DatasetKind::GaussianMean, 256, 9).generate().unwrap();
    let model = GaussianMeanModel::from_dataset(&data, DMatrix::identity(2, 2)).unwrap();
    let schedule = BatchSchedule::geometric(8, 2, 256).unwrap();
    let d = TruncationDistribution::geometric(0.7, schedule.levels()).unwrap();
    let run = |w| {
        with_workers(Some(w), || {
            run_debias(&model, &schedule, &d, &RunOptions::default(), StopRule::Replications(300), 5).unwrap()
        })
        .unwrap()
    };
    let serial = run(1);
    let parallel = run(4);
    assert_eq!(serial.replicates, parallel.replicates);
    assert_eq!(serial.mean.to_bits(), parallel.mean.to_bits());
}

#[test]
fn adapted_acceptance_suits_smooth_targets() {
    for dim in [1usize, 2, 5, 10] {
        let config = SamplerConfig {
            iterations: 4000,
            burn_in: 2000,
            ..SamplerConfig::default()
        };
        let chain = adaptive_rwm(|x: &[f64]| -0.5 * x.iter().map(|v| v * v).sum::<f64>(), &vec![0.0; dim], &config, 3)
            .unwrap();
        assert!(
            (0.1..=0.5).contains(&chain.acceptance_rate),
            "dim {dim}: acceptance {}",
            chain.acceptance_rate
        );
        assert!((chain.acceptance_rate - chain.accepted as f64 / chain.proposals as f64).abs() < 1e-12);
    }
}
