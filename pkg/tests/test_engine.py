import numpy as np
import pytest

from callback_mnar.data import Dataset, ObservationRecord, ParameterState, WorkingModelSpec
from callback_mnar.engine import (
    MEAN,
    BootstrapFailure,
    MomentSystem,
    SolverError,
    bootstrap,
    efficient_weight,
    moments_calibration,
    moments_dr,
    moments_ipw,
    moments_reg,
    numerical_jacobian,
    sandwich_variance,
    solve,
    solve_with_fallback,
    starting_values,
)
from callback_mnar.estimators import TargetOnlySystem
from callback_mnar.propensity import expit
from callback_mnar.simulation import get_scenario, true_parameters

SPEC = WorkingModelSpec()
TRUTH = true_parameters(get_scenario("TT"))


@pytest.mark.parametrize("method,dim", [("ipw", 8), ("reg", 9), ("dr", 12), ("calibration", 6)])
def test_exact_identification(method, dim):
    system = MomentSystem(method, SPEC, 3)
    assert system.dim == system.n_free == dim
    assert len(system.free_labels()) == dim


def test_calibration_needs_common_slope_layout():
    with pytest.raises(ValueError, match="common-slope"):
        MomentSystem("calibration", WorkingModelSpec.from_names(a2="linear+squares"), 3)


def test_unknown_method():
    with pytest.raises(ValueError):
        MomentSystem("gmm", SPEC, 3)


def test_pack_unpack_round_trip():
    for method in ("ipw", "reg", "dr"):
        system = MomentSystem(method, SPEC, 3)
        vec = system.pack(TRUTH)
        back = system.unpack(vec, TRUTH)
        np.testing.assert_array_equal(system.pack(back), vec)


def test_unpack_rejects_non_positive_sigma():
    system = MomentSystem("dr", SPEC, 3)
    vec = system.pack(TRUTH)
    vec[3] = -0.5
    with pytest.raises(ValueError):
        system.unpack(vec, TRUTH)


def test_first_call_record_zeroes_second_block():
    rec = ObservationRecord((1.0, 0.3, -0.2), 2.0, 1, 1)
    c = moments_ipw(rec, TRUTH, SPEC)
    np.testing.assert_array_equal(c[3:6], 0.0)


def test_mar_first_block_at_half():
    st = ParameterState([0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0], TRUTH.beta, 1.2, [0.0])
    rec = ObservationRecord((1.0, 0.4, 0.7), 1.0, 1, 1)
    np.testing.assert_allclose(moments_ipw(rec, st, SPEC)[:3], [1.0, 0.4, 0.7])


def test_score_block_vanishes_for_first_call_respondent():
    rec = ObservationRecord((1.0, 0.3, -0.2), 2.0, 1, 1)
    np.testing.assert_array_equal(moments_reg(rec, TRUTH, SPEC)[:4], 0.0)
    np.testing.assert_array_equal(moments_dr(rec, TRUTH, SPEC)[:4], 0.0)


def test_reg_imputation_without_tilt():
    st = ParameterState(TRUTH.alpha1, TRUTH.alpha2, [0.0], TRUTH.beta, 1.2, [0.0])
    rec = ObservationRecord((1.0, 0.3, -0.2), None, 0, 0)
    assert abs(moments_reg(rec, st, SPEC)[-1] - float(TRUTH.beta @ np.array([1.0, 0.3, -0.2]))) < 1e-12


def test_efficient_weight_first_call_record():
    pi1, pi2 = 0.3, 0.6
    w = efficient_weight(1.0, 1.0, 1 / pi1, 1 / pi2, (1 - pi1) / pi1)
    assert abs(w - (-(1 - pi1) / (pi1 * pi2) + 1 / pi1)) < 1e-14


def test_calibration_is_ipw_with_special_instruments():
    rng = np.random.default_rng(1)
    st = ParameterState([-1, 0.5, 0.2], [1, 0.5, 0.2], [0.16], TRUTH.beta, 1.2, [2.0])
    for _ in range(20):
        r1 = int(rng.integers(0, 2))
        r2 = max(r1, int(rng.integers(0, 2)))
        x = (1.0, *rng.uniform(-1, 1, 2))
        y = float(rng.normal(2, 1)) if r2 else None
        rec = ObservationRecord(x, y, r1, r2)
        cal = moments_calibration(rec, st, SPEC)
        lp1 = np.dot(st.alpha1, x) + st.gamma[0] * (y or 0.0)
        lp2 = np.dot(st.alpha2, x) + st.gamma[0] * (y or 0.0)
        pi1, pi2 = expit(lp1), expit(lp2)
        coef = (r2 - r1) / pi2 - (1 - pi1) / pi1 * r1
        expected = np.r_[r1 / pi1 - 1.0, coef * np.r_[x, y or 0.0]]
        np.testing.assert_allclose(cal[:5], expected, atol=1e-12)


@pytest.mark.parametrize("method", ["ipw", "reg", "dr", "calibration"])
def test_y_never_read_for_nonrespondents(tt_draw, method):
    system = MomentSystem(method, SPEC, 3)
    base = system.contributions(TRUTH, tt_draw)
    assert np.all(np.isfinite(base))
    # overwrite the unobserved outcomes with garbage: nothing may change
    poisoned = tt_draw.subset(np.arange(tt_draw.n))
    poisoned.y = np.where(poisoned.r2 == 1, poisoned.y, 1e9)
    np.testing.assert_array_equal(system.contributions(TRUTH, poisoned), base)


def test_numerical_jacobian_of_linear_map():
    a = np.array([[2.0, -1.0], [0.5, 3.0]])
    jac = numerical_jacobian(lambda v: a @ v, np.array([0.3, -0.7]))
    np.testing.assert_allclose(jac, a, atol=1e-8)


def test_solve_converges_on_tt(tt_draw):
    for method in ("ipw", "reg", "dr"):
        system = MomentSystem(method, SPEC, 3)
        res = solve(system, tt_draw, starting_values(system, tt_draw))
        assert res.converged and res.max_residual <= 1e-10
        assert res.iterations < 25
        assert res.residual_path[-1] == res.max_residual
        assert set(res.diagnostics()) >= {"iterations", "residual_path", "jacobian_condition_estimate"}


def test_solve_at_root_is_fixed_point(tt_draw):
    system = MomentSystem("dr", SPEC, 3)
    first = solve(system, tt_draw, starting_values(system, tt_draw))
    again = solve(system, tt_draw, first.params)
    assert again.iterations <= 1
    np.testing.assert_allclose(system.pack(again.params), system.pack(first.params), atol=1e-12)


def test_solve_rejects_bad_sigma(tt_draw):
    system = MomentSystem("dr", SPEC, 3)
    start = starting_values(system, tt_draw)
    start.sigma = -1.0
    with pytest.raises(ValueError):
        solve(system, tt_draw, start)


def test_solve_invariant_to_record_order(tt_draw):
    system = MomentSystem("dr", SPEC, 3)
    a = solve(system, tt_draw, starting_values(system, tt_draw))
    perm = np.random.default_rng(0).permutation(tt_draw.n)
    shuffled = tt_draw.subset(perm)
    b = solve(system, shuffled, starting_values(system, shuffled))
    np.testing.assert_allclose(system.pack(a.params), system.pack(b.params), atol=1e-8)


def test_max_iter_reports_non_convergence(tt_draw):
    system = MomentSystem("dr", SPEC, 3)
    res = solve(system, tt_draw, starting_values(system, tt_draw), max_iter=1)
    assert not res.converged and "max_iter" in res.message


def test_fallback_returns_newton_result_when_converged(tt_draw):
    system = MomentSystem("ipw", SPEC, 3)
    res = solve_with_fallback(system, tt_draw, starting_values(system, tt_draw))
    assert res.converged and "fallback" not in res.message


def _complete(y):
    n = len(y)
    return Dataset(np.ones((n, 1)), y, np.ones(n, int), np.ones(n, int))


def test_sandwich_for_sample_mean():
    y = np.random.default_rng(5).normal(3, 2, 400)
    data = _complete(y)
    system = TargetOnlySystem(MEAN)
    st = ParameterState([0.0], [0.0], [0.0], [0.0], 1.0, [y.mean()])
    var = sandwich_variance(system, data, st)[0, 0]
    assert abs(var - np.var(y) / len(y)) < 1e-10


def test_sandwich_halves_on_duplication(tt_draw):
    system = MomentSystem("dr", SPEC, 3)
    root = solve(system, tt_draw, starting_values(system, tt_draw)).params
    v1 = sandwich_variance(system, tt_draw, root)
    doubled = tt_draw.subset(np.r_[np.arange(tt_draw.n), np.arange(tt_draw.n)])
    v2 = sandwich_variance(system, doubled, root)
    np.testing.assert_allclose(v2, v1 / 2, rtol=0, atol=1e-10)


def test_bootstrap_determinism_and_gates():
    y = np.random.default_rng(2).normal(0, 1, 200)
    data = _complete(y)
    proc = lambda d: np.array([d.y.mean()])
    a = bootstrap(proc, data, 100, seed=4)
    b = bootstrap(proc, data, 100, seed=4)
    np.testing.assert_array_equal(a.lower, b.lower)
    np.testing.assert_array_equal(a.upper, b.upper)
    assert a.n_failed == 0
    with pytest.raises(ValueError):
        bootstrap(proc, data, 99, seed=4)


def test_bootstrap_fails_when_too_many_resamples_fail():
    data = _complete(np.arange(50, dtype=float))
    calls = {"k": 0}

    def flaky(d):
        calls["k"] += 1
        if calls["k"] % 5 == 0:
            raise SolverError("no root")
        return np.array([d.y.mean()])

    with pytest.raises(BootstrapFailure):
        bootstrap(flaky, data, 100, seed=0)


def test_bootstrap_sd_tracks_sandwich(tt_draw):
    from callback_mnar.estimators import estimate_mean
    rep = estimate_mean("dr", tt_draw, bootstrap_B=200, seed=11)
    assert abs(rep.bootstrap["sd"][0] - rep.se[0]) / rep.se[0] < 0.15
    assert rep.bootstrap["n_failed"] <= 20
