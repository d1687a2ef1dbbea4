"""Smoke test for the pydebias extension module.

Build and install first:  pip install --no-build-isolation ./crates/python
"""

import math

import pydebias as pd


def main():
    sched = pd.Schedule(4, 100, ratio=5)
    assert sched.sizes == [4, 20, 100], sched.sizes

    trunc = pd.Truncation(1.0, 3)
    assert abs(sum(trunc.probs) - 1.0) < 1e-12
    assert trunc.tails[0] == 1.0
    # Enumerating T recovers the last value of any deterministic path.
    assert abs(pd.exact_expectation([0.3, -1.2, 2.5], trunc) - 2.5) < 1e-12
    assert abs(pd.expected_evals(pd.Schedule(1, 4), trunc) - 17.0 / 7.0) < 1e-12

    sizes = [8.0 * 2**t for t in range(6)]
    fit = pd.fit_beta(sizes, [4.0 / n for n in sizes])
    assert abs(fit["beta"] - 1.0) < 1e-12 and abs(fit["c"] - 4.0) < 1e-10

    alpha, _ = pd.tune_alpha(pd.Schedule(128, 8192), 1.0)
    assert 0.8 < alpha < 0.9, alpha

    rows = pd.generate("gaussian_mean", 100, 7, {"dim": "2"})
    model = pd.GaussianMean(rows, [[1.0, 0.0], [0.0, 1.0]])
    truth = model.full_posterior_mean()
    est = model.debias(sched, pd.Truncation(0.5, sched.levels), 1000, 3)
    for m, se, t in zip(est["component_means"], est["component_stderrs"], truth):
        assert abs(m - t) <= 3 * se, (m, se, t)
    assert est["replications"] == 1000 and est["total_evals"] > 0

    try:
        pd.Schedule(3, 100)
    except ValueError:
        pass
    else:
        raise AssertionError("non-geometric total accepted")

    print("ok", [round(x, 4) for x in truth], [round(x, 4) for x in est["component_means"]],
          "alpha", round(alpha, 4), "sqrt2", round(math.sqrt(2), 4))


if __name__ == "__main__":
    main()
