import dataclasses

import numpy as np
import pytest
from scipy.integrate import trapezoid

from callback_mnar.simulation import (
    SCENARIOS,
    ScenarioSpec,
    ScenarioUnusableError,
    conditional_mean,
    conditional_outcome_density,
    get_scenario,
    mixture_components,
    response_rate,
    run_replications,
    sample_dataset,
    true_mean,
    true_mean_from_tables,
    true_nonrespondent_mean,
    true_propensities,
)

TT = get_scenario("TT")
X0 = np.array([[1.0, 0.3, -0.4]])


def test_untilted_density_is_gaussian():
    mar = dataclasses.replace(TT, gamma=0.0)
    grid, dens = conditional_outcome_density(mar, X0)
    m = float(X0[0] @ np.array(TT.beta))
    gauss = np.exp(-0.5 * ((grid - m) / TT.sigma) ** 2) / (TT.sigma * np.sqrt(2 * np.pi))
    assert np.max(np.abs(dens - gauss)) < 1e-9


def test_density_normalized_and_matches_mixture():
    grid, dens = conditional_outcome_density(TT, X0)
    assert abs(trapezoid(dens, grid) - 1.0) < 1e-10
    assert abs(trapezoid(grid * dens, grid) - conditional_mean(TT, X0)[0]) < 1e-8


def test_stratum_law_by_bayes():
    # f(y | x, R1 = 1) from the mixture equals pi1 f(y | x) / P(R1 = 1 | x)
    grid, dens = conditional_outcome_density(TT, X0)
    pi1, _ = true_propensities(TT, np.repeat(X0, len(grid), axis=0), grid)
    p_r1 = trapezoid(pi1 * dens, grid)
    logp, shifts, m = mixture_components(TT, X0)
    p = np.exp(logp[0])
    assert abs(p[1] + p[3] - p_r1) < 1e-7
    comp_mean = (p[1] * (m[0] + shifts[1]) + p[3] * (m[0] + shifts[3])) / (p[1] + p[3])
    assert abs(comp_mean - trapezoid(grid * pi1 * dens, grid) / p_r1) < 1e-7


def test_same_seed_same_data():
    a = sample_dataset(TT, 200, 5)
    b = sample_dataset(TT, 200, 5)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(a.r2, b.r2)
    assert not np.array_equal(a.y, sample_dataset(TT, 200, 6).y, equal_nan=True)


def test_large_draw_matches_true_mean_and_strata():
    data, y = sample_dataset(TT, 1_000_000, 17, keep_full=True)
    se = y.std() / np.sqrt(len(y))
    assert abs(y.mean() - true_mean(TT)) < 3 * se
    miss = data.r2 == 0
    assert abs(y[miss].mean() - true_nonrespondent_mean(TT)) < 3 * y[miss].std() / np.sqrt(miss.sum())
    rate_se = np.sqrt(0.25 / len(y))
    assert abs(data.r2.mean() - response_rate(TT)) < 3 * rate_se
    assert np.all(data.r2 >= data.r1)
    assert np.all(np.isnan(data.y) == (data.r2 == 0))


def test_true_mean_without_tilt():
    mar = dataclasses.replace(TT, gamma=0.0)
    assert abs(true_mean(mar) - TT.beta[0]) < 1e-8


@pytest.mark.parametrize("name", ["TT", "FT"])
def test_true_mean_by_two_routes(name):
    sc = get_scenario(name)
    assert abs(true_mean(sc) - true_mean_from_tables(sc, order=12, points=1024)) < 1e-6


def test_sensitivity_delta_changes_truth():
    assert true_mean(TT.with_delta(0.1)) != true_mean(TT)
    assert TT.with_delta(0.1).sensitivity_delta == 0.1


def test_covariate_override():
    cov = np.zeros((10, 2))
    data = sample_dataset(TT, 10, 1, covariates=cov)
    np.testing.assert_array_equal(data.x[:, 1:], 0.0)
    with pytest.raises(ValueError, match="shape"):
        sample_dataset(TT, 10, 1, covariates=np.zeros((10, 3)))


def test_scenario_validation_and_round_trip():
    with pytest.raises(ValueError):
        dataclasses.replace(TT, sigma=0.0)
    with pytest.raises(ValueError):
        dataclasses.replace(TT, beta=(1.0, 2.0))
    for sc in SCENARIOS.values():
        assert ScenarioSpec.from_dict(sc.to_dict()) == sc
    with pytest.raises(ValueError, match="unknown scenario"):
        get_scenario("XX")


def test_small_replication_study_is_deterministic():
    a = run_replications(TT, ["ipw", "dr"], 4, 400, 3)
    b = run_replications(TT, ["ipw", "dr"], 4, 400, 3)
    assert a.rows == b.rows
    assert len(a.rows) == 4 and len(a.estimates) == 8
    for row in a.rows:
        assert 0.0 <= row["coverage"] <= 1.0 and row["n_fail"] == 0


def test_unusable_scenario_keeps_metrics():
    with pytest.raises(ScenarioUnusableError) as info:
        run_replications(TT, ["dr"], 3, 400, 3, tol=1e-30)
    assert info.value.metrics.row("dr", "mu")["n_fail"] == 3
