"""Link functions and call-specific response propensities.

Both calls share the odds ratio ``Gamma(x, y) = gamma' g(x, y)``:

    pi1 = expit(A1(x) + Gamma(x, y)),   pi2 = expit(A2(x) + Gamma(x, y)),

and the probability of having responded by the second call is
``p2 = pi1 + pi2 * (1 - pi1)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ParameterState, WorkingModelSpec


def expit(t):
    """Overflow-safe logistic function."""
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else float(out)


def logit(p):
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0) | (p >= 1)) or np.any(np.isnan(p)):
        raise ValueError("logit is defined only on (0, 1)")
    out = np.log(p) - np.log1p(-p)
    return out if out.ndim else float(out)


def log1pexp(t):
    """log(1 + exp(t)) without overflow."""
    t = np.asarray(t, dtype=float)
    return np.logaddexp(0.0, t)


@dataclass(frozen=True)
class PropensityValues:
    pi1: np.ndarray
    pi2: np.ndarray
    p2: np.ndarray


def odds_ratio(x, y, spec: WorkingModelSpec, gamma) -> np.ndarray:
    """Gamma(x, y) = gamma' g(x, y); zero at y = 0 by construction of g."""
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    feats = spec.gamma_design(np.atleast_2d(x), y)
    if feats.shape[-1] != gamma.size:
        raise ValueError(f"gamma has dimension {gamma.size}, design has {feats.shape[-1]}")
    return feats @ gamma


def baseline_predictors(x, spec: WorkingModelSpec, params: ParameterState):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    f1 = spec.a1_design(x)
    f2 = spec.a2_design(x)
    if f1.shape[1] != params.alpha1.size or f2.shape[1] != params.alpha2.size:
        raise ValueError("alpha dimensions do not match the baseline designs")
    return f1 @ params.alpha1, f2 @ params.alpha2


def propensities(x, y, spec: WorkingModelSpec, params: ParameterState) -> PropensityValues:
    """Vectorized propensities for rows of ``x`` and matching ``y``."""
    a1, a2 = baseline_predictors(x, spec, params)
    g = odds_ratio(x, y, spec, params.gamma)
    if g.ndim > a1.ndim:
        a1 = a1[:, None]
        a2 = a2[:, None]
    pi1 = expit(a1 + g)
    pi2 = expit(a2 + g)
    return PropensityValues(pi1, pi2, pi1 + pi2 * (1.0 - pi1))
