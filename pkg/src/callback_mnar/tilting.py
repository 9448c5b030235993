"""Expectations under the exponentially tilted nonrespondent law.

The nonrespondent outcome law is the second-call respondent law
``f2(y | x) = N(beta' h(x), sigma^2)`` reweighted by ``exp(-Gamma(x, y))``
and renormalized. Expectations are computed by Gauss-Hermite quadrature
after the substitution ``y = m + sqrt(2) sigma t`` around the untilted mean
``m``; for the linear tilt ``Gamma = gamma * y`` closed forms are available.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .data import ParameterState, WorkingModelSpec
from .propensity import expit, odds_ratio

SUPPORTED_ORDERS = (16, 32, 64, 96)
_LOG_TINY = np.log(1e-300)


class DegenerateTiltError(ArithmeticError):
    """The tilt normalizer underflowed or a tilted ratio is not finite."""


@lru_cache(maxsize=None)
def _rule(n: int):
    nodes, weights = np.polynomial.hermite.hermgauss(n)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def gauss_hermite_rule(n: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for the weight function exp(-t^2)."""
    if n not in SUPPORTED_ORDERS:
        raise ValueError(f"unsupported quadrature order {n}; choose from {SUPPORTED_ORDERS}")
    return _rule(n)


@dataclass(frozen=True)
class TiltedLaw:
    beta: np.ndarray
    sigma: float
    gamma: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


def outcome_mean(x, spec: WorkingModelSpec, beta) -> np.ndarray:
    return spec.outcome_design(np.atleast_2d(x)) @ np.atleast_1d(beta)


class TiltedNodes:
    """Quadrature nodes and normalized tilted weights for a batch of x rows."""

    def __init__(self, x, spec: WorkingModelSpec, beta, sigma: float, gamma, order: int | None = None):
        order = order or spec.quadrature_order
        t, w = gauss_hermite_rule(order)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        m = outcome_mean(x, spec, beta)
        self.x = x
        self.y = m[:, None] + np.sqrt(2.0) * sigma * t[None, :]
        logw = np.log(w)[None, :] - odds_ratio(x, self.y, spec, gamma)
        lognorm = logsumexp(logw, axis=1) - 0.5 * np.log(np.pi)
        if not np.all(np.isfinite(lognorm)) or np.any(lognorm < _LOG_TINY):
            raise DegenerateTiltError("tilt normalizer underflow; working model incompatible with data")
        self.weights = np.exp(logw - logsumexp(logw, axis=1, keepdims=True))

    def expect(self, values: np.ndarray) -> np.ndarray:
        """E over the tilted law; ``values`` has shape (n, K) or (n, K, q)."""
        if values.ndim == 3:
            return np.einsum("nk,nkq->nq", self.weights, values)
        return np.sum(self.weights * values, axis=1)


def tilted_expectation(g: Callable, law: TiltedLaw, spec: WorkingModelSpec, order: int | None = None):
    """E{g(Y) | X = x, R2 = 0} for a single covariate point."""
    nodes = TiltedNodes(law.x, spec, law.beta, law.sigma, law.gamma, order)
    vals = np.asarray(g(nodes.y[0]), dtype=float)
    if vals.ndim == 1:
        return float(np.dot(nodes.weights[0], vals))
    return nodes.weights[0] @ vals


def closed_form_tilted_mean(law: TiltedLaw, spec: WorkingModelSpec) -> tuple[float, bool]:
    """m - gamma sigma^2 when the tilt is exactly gamma * y; (nan, False) otherwise."""
    if not spec.linear_tilt:
        return float("nan"), False
    m = float(outcome_mean(law.x, spec, law.beta)[0])
    return m - float(np.atleast_1d(law.gamma)[0]) * law.sigma ** 2, True


def tilted_mean_batch(x, spec: WorkingModelSpec, params: ParameterState, order: int | None = None) -> np.ndarray:
    """E(Y | X, R2 = 0) for every row of ``x``."""
    if spec.tilt_method == "auto" and spec.linear_tilt:
        m = outcome_mean(x, spec, params.beta)
        return m - params.gamma[0] * params.sigma ** 2
    nodes = TiltedNodes(x, spec, params.beta, params.sigma, params.gamma, order)
    return nodes.expect(nodes.y)


def tilted_gamma_features_batch(x, spec: WorkingModelSpec, params: ParameterState,
                                order: int | None = None) -> np.ndarray:
    """E{g(X, Y) | X, R2 = 0} for the odds-ratio features g, shape (n, q)."""
    if spec.tilt_method == "auto" and spec.linear_tilt:
        return tilted_mean_batch(x, spec, params)[:, None]
    nodes = TiltedNodes(x, spec, params.beta, params.sigma, params.gamma, order)
    return nodes.expect(spec.gamma_design(nodes.x, nodes.y))


def tilted_instrument_batch(x, spec: WorkingModelSpec, params: ParameterState, umap,
                            order: int | None = None) -> np.ndarray:
    """E{U(X, Y) | X, R2 = 0} for an instrument map ``umap`` of (x, y), shape (n, q)."""
    if umap is spec.gamma_design:
        return tilted_gamma_features_batch(x, spec, params, order)
    nodes = TiltedNodes(x, spec, params.beta, params.sigma, params.gamma, order)
    return nodes.expect(_flat_eval(umap, nodes))


def _inv_pi2(x, y, spec, params):
    a2 = spec.a2_design(np.atleast_2d(x)) @ params.alpha2
    lp = a2[:, None] + odds_ratio(x, y, spec, params.gamma)
    with np.errstate(over="ignore"):
        return 1.0 + np.exp(-lp)


def dr_regression_ratio(x, spec: WorkingModelSpec, params: ParameterState, order: int | None = None,
                        method: str = "quadrature") -> np.ndarray:
    """E(Y / pi2 | X, R2 = 0) / E(1 / pi2 | X, R2 = 0) for every row of ``x``.

    ``method="auto"`` uses the closed form for a linear tilt with Gaussian f2.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if method == "auto" and spec.linear_tilt:
        g = params.gamma[0]
        s2 = params.sigma ** 2
        shifted = outcome_mean(x, spec, params.beta) - g * s2
        a2 = spec.a2_design(x) @ params.alpha2
        # 1/pi2 = 1 + exp(-A2 - g y); under N(shifted, s2) the correction is a logistic weight
        logc = -a2 - g * shifted + 0.5 * g * g * s2
        out = shifted - g * s2 * expit(logc)
    else:
        nodes = TiltedNodes(x, spec, params.beta, params.sigma, params.gamma, order)
        inv = _inv_pi2(x, nodes.y, spec, params)
        out = nodes.expect(nodes.y * inv) / nodes.expect(inv)
    if not np.all(np.isfinite(out)):
        raise DegenerateTiltError("non-finite regression ratio")
    return out


def dr_functional_ratio(x, spec: WorkingModelSpec, params: ParameterState, m_values: Callable,
                        order: int | None = None):
    """E(m / pi2 | X, R2 = 0) / E(1 / pi2 | X, R2 = 0) for a vector function m(x, y)."""
    nodes = TiltedNodes(x, spec, params.beta, params.sigma, params.gamma, order)
    inv = _inv_pi2(x, nodes.y, spec, params)
    vals = _flat_eval(m_values, nodes)
    out = nodes.expect(vals * inv[..., None]) / nodes.expect(inv)[:, None]
    if not np.all(np.isfinite(out)):
        raise DegenerateTiltError("non-finite regression ratio")
    return out


def tilted_functional(x, spec: WorkingModelSpec, params: ParameterState, m_values: Callable,
                      order: int | None = None):
    """E{m(X, Y) | X, R2 = 0}, shape (n, q)."""
    nodes = TiltedNodes(x, spec, params.beta, params.sigma, params.gamma, order)
    return nodes.expect(_flat_eval(m_values, nodes))


def _flat_eval(m_values: Callable, nodes: TiltedNodes) -> np.ndarray:
    # m works on flat rows; evaluate at every (row, node) pair and restore the grid
    n, k = nodes.y.shape
    vals = np.asarray(m_values(np.repeat(nodes.x, k, axis=0), nodes.y.ravel()), dtype=float)
    return vals.reshape(n, k, -1)
