import numpy as np
import pytest
from scipy.integrate import trapezoid

from callback_mnar.data import ParameterState, WorkingModelSpec
from callback_mnar.tilting import (
    DegenerateTiltError,
    TiltedLaw,
    TiltedNodes,
    closed_form_tilted_mean,
    dr_functional_ratio,
    dr_regression_ratio,
    gauss_hermite_rule,
    tilted_expectation,
    tilted_gamma_features_batch,
    tilted_mean_batch,
)

LIN = WorkingModelSpec(tilt_method="quadrature")
QUAD = WorkingModelSpec.from_names(gamma="y+y^2", tilt_method="quadrature")


def test_rule_moments():
    t, w = gauss_hermite_rule(16)
    assert abs(w.sum() - np.sqrt(np.pi)) < 1e-10
    assert abs(w @ t ** 2 - np.sqrt(np.pi) / 2) < 1e-10
    assert abs(w @ t) < 1e-14


def test_rule_rejects_unsupported_order():
    with pytest.raises(ValueError):
        gauss_hermite_rule(20)


def test_rule_is_read_only():
    t, _ = gauss_hermite_rule(64)
    with pytest.raises(ValueError):
        t[0] = 1.0


def _law(m, sigma, gamma, d=3):
    x = np.zeros(d)
    x[0] = 1.0
    beta = np.zeros(d)
    beta[0] = m
    return TiltedLaw(beta, sigma, np.atleast_1d(gamma), x)


def test_untilted_mean():
    law = TiltedLaw(np.array([0.3, 1.0, -2.0]), 0.7, np.array([0.0]), np.array([1.0, 0.5, 0.25]))
    assert abs(tilted_expectation(lambda y: y, law, LIN) - (0.3 + 0.5 - 0.5)) < 1e-12


def test_linear_tilt_mean_completes_the_square():
    law = _law(2.0, 1.0, 0.5)
    assert abs(tilted_expectation(lambda y: y, law, LIN) - 1.5) < 1e-10
    value, ok = closed_form_tilted_mean(law, LIN)
    assert ok and abs(value - 1.5) < 1e-15


def test_normalization():
    law = _law(-1.0, 1.7, 0.8)
    assert abs(tilted_expectation(lambda y: np.ones_like(y), law, LIN) - 1.0) < 1e-12


def test_closed_form_values():
    value, ok = closed_form_tilted_mean(_law(0.0, 1.2, 0.16), LIN)
    assert ok and abs(value + 0.2304) < 1e-12
    assert abs(tilted_expectation(lambda y: y, _law(0.0, 1.2, 0.16), LIN) - value) < 1e-10
    assert closed_form_tilted_mean(_law(0.7, 1.0, 0.0), LIN)[0] == 0.7
    value, ok = closed_form_tilted_mean(_law(0.0, 1.0, [0.1, 0.1]), QUAD)
    assert not ok and np.isnan(value)


def test_vector_valued_expectation():
    law = _law(1.0, 0.5, 0.2)
    out = tilted_expectation(lambda y: np.column_stack([y, y ** 2]), law, LIN)
    m = 1.0 - 0.2 * 0.25
    np.testing.assert_allclose(out, [m, m * m + 0.25], atol=1e-12)


def test_orders_agree_on_quadratic_tilt():
    law = _law(0.5, 1.3, [0.4, 0.1])
    a = tilted_expectation(lambda y: y, law, QUAD, 64)
    b = tilted_expectation(lambda y: y, law, QUAD, 96)
    assert abs(a - b) < 1e-8
    # a positive y^2 coefficient in the tilt shrinks the variance
    var = tilted_expectation(lambda y: (y - a) ** 2, law, QUAD)
    assert var < 1.3 ** 2


def test_batch_helpers_match_pointwise():
    rng = np.random.default_rng(0)
    x = np.column_stack([np.ones(5), rng.uniform(-1, 1, (5, 2))])
    st = ParameterState(np.zeros(3), np.zeros(3), [0.3], [0.5, 1.0, -1.0], 0.9, [0.0])
    auto = tilted_mean_batch(x, WorkingModelSpec(), st)
    quad = tilted_mean_batch(x, LIN, st)
    np.testing.assert_allclose(auto, quad, atol=1e-10)
    np.testing.assert_allclose(tilted_gamma_features_batch(x, LIN, st)[:, 0], quad, atol=1e-14)


def test_degenerate_tilt_raises():
    with pytest.raises(DegenerateTiltError):
        TiltedNodes(np.array([[1.0, 0.0, 0.0]]), LIN, np.array([100.0, 0.0, 0.0]), 0.5, [10.0])


def _ratio_params(gamma, sigma, beta=(2.5, 2.3, 1.6), alpha2=(1.0, 0.5, 0.2)):
    return ParameterState(np.zeros(3), np.asarray(alpha2), [gamma], np.asarray(beta), sigma, [0.0])


def test_ratio_without_tilt_is_untilted_mean():
    x = np.array([[1.0, 0.3, -0.2]])
    st = _ratio_params(0.0, 1.2)
    assert abs(dr_regression_ratio(x, LIN, st)[0] - (2.5 + 0.69 - 0.32)) < 1e-8


def test_ratio_matches_dense_trapezoid():
    st = _ratio_params(0.16, 1.2)
    x = np.array([[1.0, 0.0, 0.0]])
    m, s, g = 2.5, 1.2, 0.16
    y = np.linspace(m - 12 * s, m + 12 * s, 20001)
    dens = np.exp(-0.5 * ((y - m) / s) ** 2 - g * y)
    inv = 1.0 + np.exp(-(1.0 + g * y))
    oracle = trapezoid(y * inv * dens, y) / trapezoid(inv * dens, y)
    assert abs(dr_regression_ratio(x, LIN, st)[0] - oracle) < 1e-7
    assert abs(dr_regression_ratio(x, WorkingModelSpec(), st, method="auto")[0] - oracle) < 1e-7


def test_ratio_point_mass_limit():
    st = _ratio_params(0.16, 1e-6)
    x = np.array([[1.0, 0.2, 0.1]])
    assert abs(dr_regression_ratio(x, LIN, st)[0] - (2.5 + 0.46 + 0.16)) < 1e-4


def test_closed_form_ratio_agrees_with_quadrature():
    rng = np.random.default_rng(3)
    for _ in range(50):
        x = np.column_stack([np.ones(4), rng.uniform(-1, 1, (4, 2))])
        st = _ratio_params(rng.uniform(-1, 1), rng.uniform(0.2, 2.0), rng.normal(0, 1, 3), rng.normal(0, 1, 3))
        a = dr_regression_ratio(x, LIN, st)
        b = dr_regression_ratio(x, WorkingModelSpec(), st, method="auto")
        np.testing.assert_allclose(a, b, atol=1e-9)


def test_functional_ratio_reduces_to_mean_ratio():
    st = _ratio_params(0.3, 0.8)
    x = np.array([[1.0, 0.1, 0.4], [1.0, -0.6, 0.2]])
    a = dr_regression_ratio(x, LIN, st)
    b = dr_functional_ratio(x, LIN, st, lambda xx, yy: yy[:, None])
    np.testing.assert_allclose(a, b[:, 0], atol=1e-13)
