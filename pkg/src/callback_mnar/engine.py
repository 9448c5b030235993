"""Stacked estimating equations, a damped Newton solver and variance estimates.

Each :class:`MomentSystem` maps a parameter state and a dataset to an
``(n, dim)`` array of per-record contributions. All systems are exactly
identified: the number of stacked moments equals the number of free
parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import optimize

from .data import Dataset, FeatureMap, ObservationRecord, ParameterState, WorkingModelSpec
from .propensity import expit, odds_ratio
from .tilting import (
    DegenerateTiltError,
    dr_functional_ratio,
    dr_regression_ratio,
    tilted_functional,
    tilted_instrument_batch,
    tilted_mean_batch,
)

log = logging.getLogger(__name__)

METHODS = ("ipw", "reg", "dr", "calibration")


class SolverError(RuntimeError):
    pass


class SingularJacobianError(SolverError):
    pass


class PositivityError(ArithmeticError):
    """A propensity evaluated to a non-finite inverse at the current iterate."""


@dataclass(frozen=True)
class TargetFunctional:
    """Full-data functional defined by E{m(X, Y; theta)} = 0.

    ``m(x, y, theta)`` receives ``x`` of shape (N, d) and ``y`` of shape (N,)
    and returns (N, dim).
    """

    m: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    dim: int
    name: str = "functional"
    is_mean: bool = False

    def values(self, x, y, theta) -> np.ndarray:
        out = np.asarray(self.m(x, y, theta), dtype=float)
        return out.reshape(len(y), self.dim)


def _mean_m(x, y, theta):
    return (y - theta[0])[:, None]


MEAN = TargetFunctional(_mean_m, 1, "mean", is_mean=True)


@dataclass
class SolveResult:
    params: ParameterState
    iterations: int
    max_residual: float
    converged: bool
    jacobian_condition_estimate: float
    residual_path: list[float] = field(default_factory=list)
    non_monotone_steps: int = 0
    message: str = ""

    def diagnostics(self) -> dict:
        return {
            "iterations": self.iterations,
            "max_residual": self.max_residual,
            "converged": self.converged,
            "jacobian_condition_estimate": self.jacobian_condition_estimate,
            "residual_path": self.residual_path,
            "non_monotone_steps": self.non_monotone_steps,
            "message": self.message,
        }


# ---------------------------------------------------------------------------
# Moment systems


class MomentSystem:
    """Stacked estimating functions for one estimator family.

    ``method`` is one of ``ipw``, ``reg``, ``dr`` or ``calibration``.
    """

    SLOTS = {
        "ipw": ("alpha1", "alpha2", "gamma", "target"),
        "reg": ("beta", "sigma", "alpha1", "gamma", "target"),
        "dr": ("beta", "sigma", "alpha1", "alpha2", "gamma", "target"),
    }

    def __init__(self, method: str, spec: WorkingModelSpec, d: int,
                 target: TargetFunctional = MEAN, u_reg: Optional[FeatureMap] = None):
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}")
        self.method = method
        self.spec = spec
        self.d = d
        self.target = target
        self.u_reg = u_reg
        dims = spec.dims(d)
        dims["sigma"] = 1
        dims["target"] = target.dim
        self.dims = dims
        if method == "calibration":
            check_common_slope(spec)
            self.layout = [("alpha10", 1), ("alpha20", 1), ("slope", d - 1), ("gamma", 1), ("target", target.dim)]
        else:
            self.layout = [(s, dims[s]) for s in self.SLOTS[method]]
        self.n_free = sum(size for _, size in self.layout)
        self.dim = self._moment_dim()
        if self.dim != self.n_free:
            raise ValueError(
                f"{method} system is not exactly identified: {self.dim} moments for {self.n_free} parameters")

    # -- parameter packing --------------------------------------------------

    def pack(self, state: ParameterState) -> np.ndarray:
        if self.method == "calibration":
            return np.concatenate([state.alpha1[:1], state.alpha2[:1], state.alpha1[1:],
                                   state.gamma, state.target])
        parts = []
        for name, _ in self.layout:
            v = getattr(state, name)
            parts.append(np.atleast_1d(v))
        return np.concatenate(parts).astype(float)

    def unpack(self, vec: np.ndarray, template: ParameterState) -> ParameterState:
        """New state with the free slots taken from ``vec``; raises on sigma <= 0."""
        vals = {}
        pos = 0
        for name, size in self.layout:
            vals[name] = np.asarray(vec[pos:pos + size], dtype=float)
            pos += size
        if self.method == "calibration":
            slope = vals["slope"]
            return ParameterState(
                np.concatenate([vals["alpha10"], slope]), np.concatenate([vals["alpha20"], slope]),
                vals["gamma"], template.beta, template.sigma, vals["target"])
        kw = {name: getattr(template, name) for name in ParameterState.SLOTS}
        for name, v in vals.items():
            kw[name] = float(v[0]) if name == "sigma" else v
        return ParameterState(**kw)

    def free_labels(self) -> list[str]:
        labels = []
        for name, size in self.layout:
            labels += [name] if size == 1 and name in ("sigma", "alpha10", "alpha20") else \
                [f"{name}[{j}]" for j in range(size)]
        return labels

    # -- moments ------------------------------------------------------------

    def _moment_dim(self) -> int:
        x = np.ones((1, self.d))
        s = self.spec
        q = self.target.dim
        if self.method == "ipw":
            return s.instrument_v1(x).shape[1] + s.instrument_v2(x).shape[1] + s.instrument_u(x, np.ones(1)).shape[1] + q
        if self.method == "reg":
            return self.dims["beta"] + 1 + self._reg_instrument(x, np.ones(1)).shape[1] + q
        if self.method == "dr":
            return (self.dims["beta"] + 1 + s.instrument_v1(x).shape[1] + s.instrument_v2(x).shape[1]
                    + s.instrument_u(x, np.ones(1)).shape[1] + q)
        return 1 + (self.d + 1) + q

    def _reg_instrument(self, x, y):
        if self.u_reg is not None:
            return self.u_reg(x, y)
        return np.hstack([self.spec.a1_design(x), self.spec.gamma_design(x, y)])

    def contributions(self, state: ParameterState, data: Dataset) -> np.ndarray:
        """Per-record stacked estimating functions, shape (n, dim)."""
        fn = {"ipw": self._ipw, "reg": self._reg, "dr": self._dr, "calibration": self._calibration}[self.method]
        with np.errstate(over="ignore", invalid="ignore"):
            out = fn(state, data)
        return out

    def contribution(self, record: ObservationRecord, state: ParameterState) -> np.ndarray:
        data = Dataset.from_records([record])
        return self.contributions(state, data)[0]

    def contributions_vec(self, vec: np.ndarray, data: Dataset, template: ParameterState) -> np.ndarray:
        return self.contributions(self.unpack(vec, template), data)

    # shared pieces

    def _propensity_terms(self, state, data):
        x = data.x
        yo = data.y_observed
        g = odds_ratio(x, yo, self.spec, state.gamma)
        lp1 = self.spec.a1_design(x) @ state.alpha1 + g
        lp2 = self.spec.a2_design(x) @ state.alpha2 + g
        inv1 = 1.0 + np.exp(-lp1)          # 1/pi1
        inv2 = 1.0 + np.exp(-lp2)          # 1/pi2
        odds1_inv = np.exp(-lp1)           # (1 - pi1)/pi1
        if not (np.all(np.isfinite(inv1)) and np.all(np.isfinite(inv2))):
            raise PositivityError("propensity numerically zero at current parameters")
        return yo, inv1, inv2, odds1_inv, lp1, lp2

    def _score_block(self, state, data, yo):
        h = self.spec.outcome_design(data.x)
        resid = yo - h @ state.beta
        ind = (data.r2 - data.r1).astype(float)
        return np.hstack([ind[:, None] * resid[:, None] * h,
                          (ind * (resid ** 2 - state.sigma ** 2))[:, None]])

    def _target_ipw(self, state, data, yo, inv1, inv2):
        r2 = data.r2.astype(float)
        pi1 = 1.0 / inv1
        pi2 = 1.0 / inv2
        p2 = pi1 + pi2 * (1.0 - pi1)
        if self.target.is_mean:
            return (r2 * yo / p2 - state.target[0])[:, None]
        vals = self._m_observed(state, data)
        return (r2 / p2)[:, None] * vals

    def _m_observed(self, state, data):
        obs = data.r2 == 1
        vals = np.zeros((data.n, self.target.dim))
        if np.any(obs):
            vals[obs] = self.target.values(data.x[obs], data.y[obs], state.target)
        return vals

    # families

    def _ipw(self, state, data):
        s = self.spec
        r1 = data.r1.astype(float)
        r2 = data.r2.astype(float)
        yo, inv1, inv2, odds1_inv, _, _ = self._propensity_terms(state, data)
        b1 = (r1 * inv1 - 1.0)[:, None] * s.instrument_v1(data.x)
        b2 = ((r2 - r1) * inv2 - (1.0 - r1))[:, None] * s.instrument_v2(data.x)
        coef = (r2 - r1) * inv2 - r1 * odds1_inv
        b3 = coef[:, None] * s.instrument_u(data.x, yo)
        b4 = self._target_ipw(state, data, yo, inv1, inv2)
        return np.hstack([b1, b2, b3, b4])

    def _calibration(self, state, data):
        r1 = data.r1.astype(float)
        r2 = data.r2.astype(float)
        yo, inv1, inv2, odds1_inv, _, _ = self._propensity_terms(state, data)
        b1 = (r1 * inv1 - 1.0)[:, None]
        coef = (r2 - r1) * inv2 - r1 * odds1_inv
        inst = np.hstack([data.x, yo[:, None]])
        b2 = coef[:, None] * inst
        b3 = self._target_ipw(state, data, yo, inv1, inv2)
        return np.hstack([b1, b2, b3])

    def _reg(self, state, data):
        s = self.spec
        r1 = data.r1.astype(float)
        r2 = data.r2.astype(float)
        yo, inv1, _, _, _, _ = self._propensity_terms_first(state, data)
        score = self._score_block(state, data, yo)
        u = self._reg_instrument(data.x, yo)
        eu = self._tilted_reg_instrument(state, data)
        b_u = (r1 * inv1 - r2)[:, None] * u - (1.0 - r2)[:, None] * eu
        if self.target.is_mean:
            imputed = tilted_mean_batch(data.x, s, state)
            b_t = (r2 * yo + (1.0 - r2) * imputed - state.target[0])[:, None]
        else:
            b_t = self._m_observed(state, data)
            mis = data.r2 == 0
            if np.any(mis):
                b_t[mis] = tilted_functional(
                    data.x[mis], s, state, lambda xx, yy: self.target.values(xx, yy, state.target))
        return np.hstack([score, b_u, b_t])

    def _propensity_terms_first(self, state, data):
        x = data.x
        yo = data.y_observed
        lp1 = self.spec.a1_design(x) @ state.alpha1 + odds_ratio(x, yo, self.spec, state.gamma)
        inv1 = 1.0 + np.exp(-lp1)
        if not np.all(np.isfinite(inv1)):
            raise PositivityError("first-call propensity numerically zero at current parameters")
        return yo, inv1, None, None, lp1, None

    def _tilted_reg_instrument(self, state, data):
        s = self.spec
        if self.u_reg is None:
            # x-part is constant under the tilted law
            return np.hstack([s.a1_design(data.x),
                              tilted_instrument_batch(data.x, s, state, s.gamma_design)])
        return tilted_instrument_batch(data.x, s, state, self.u_reg)

    def _dr(self, state, data):
        s = self.spec
        r1 = data.r1.astype(float)
        r2 = data.r2.astype(float)
        yo, inv1, inv2, odds1_inv, _, _ = self._propensity_terms(state, data)
        score = self._score_block(state, data, yo)
        b1 = (r1 * inv1 - 1.0)[:, None] * s.instrument_v1(data.x)
        b2 = ((r2 - r1) * inv2 - (1.0 - r1))[:, None] * s.instrument_v2(data.x)
        coef = (r2 - r1) * inv2 - r1 * odds1_inv
        umap = s.u or s.gamma_design
        u = s.instrument_u(data.x, yo)
        eu = tilted_instrument_batch(data.x, s, state, umap)
        b3 = coef[:, None] * (u - eu)
        w = efficient_weight(r1, r2, inv1, inv2, odds1_inv)
        if self.target.is_mean:
            method = "auto" if s.tilt_method == "auto" else "quadrature"
            ratio = dr_regression_ratio(data.x, s, state, method=method)
            b_t = (w * (yo - ratio) + ratio - state.target[0])[:, None]
        else:
            theta = state.target
            ratio = dr_functional_ratio(data.x, s, state, lambda xx, yy: self.target.values(xx, yy, theta))
            m = self._m_observed(state, data)
            obs = r2[:, None]
            b_t = obs * ((w[:, None] - 1.0) * (m - ratio) + m) + (1.0 - obs) * ratio
        return np.hstack([score, b1, b2, b3, b_t])


def _record_moments(method):
    def moments(record: ObservationRecord, params: ParameterState, spec: WorkingModelSpec) -> np.ndarray:
        return MomentSystem(method, spec, len(record.x)).contribution(record, params)
    moments.__name__ = f"moments_{method}"
    moments.__doc__ = f"Stacked {method} contribution of one record."
    return moments


moments_ipw = _record_moments("ipw")
moments_reg = _record_moments("reg")
moments_dr = _record_moments("dr")
moments_calibration = _record_moments("calibration")


def efficient_weight(r1, r2, inv1, inv2, odds1_inv):
    """(R2-R1)/pi2^2 - R1 (1-pi1)/(pi1 pi2) + R1/pi1, written with inverse propensities."""
    return (r2 - r1) * inv2 ** 2 - r1 * odds1_inv * inv2 + r1 * inv1


def check_common_slope(spec: WorkingModelSpec) -> None:
    if not (spec.a1_design.name == "linear" and spec.a2_design.name == "linear"
            and spec.linear_tilt):
        raise ValueError("calibration requires the common-slope layout: linear baseline designs "
                         "with a shared covariate slope and odds ratio gamma * y")


# ---------------------------------------------------------------------------
# Starting values


def logistic_fit(features: np.ndarray, response: np.ndarray, max_iter: int = 50) -> np.ndarray:
    """Maximum likelihood logistic regression by Newton-Raphson; zeros on failure."""
    coef = np.zeros(features.shape[1])
    for _ in range(max_iter):
        p = expit(features @ coef)
        grad = features.T @ (response - p)
        hess = (features * (p * (1 - p))[:, None]).T @ features
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return np.zeros(features.shape[1])
        coef = coef + step
        if not np.all(np.isfinite(coef)):
            return np.zeros(features.shape[1])
        if np.max(np.abs(step)) < 1e-10:
            break
    return coef


def starting_values(system: MomentSystem, data: Dataset, target_init=None) -> ParameterState:
    """MAR-anchored starts: logistic fits with gamma = 0 and least squares for f2."""
    s = system.spec
    x = data.x
    r1 = data.r1.astype(float)
    r2 = data.r2.astype(float)
    alpha1 = logistic_fit(s.a1_design(x), r1)
    later = data.r1 == 0
    alpha2 = logistic_fit(s.a2_design(x[later]), r2[later])
    second = (data.r1 == 0) & (data.r2 == 1)
    h = s.outcome_design(x[second])
    ys = data.y[second]
    beta, *_ = np.linalg.lstsq(h, ys, rcond=None)
    resid = ys - h @ beta
    sigma = float(np.sqrt(np.mean(resid ** 2))) if len(ys) else 1.0
    if not sigma > 0:
        sigma = 1.0
    gamma = np.zeros(s.gamma_design.dim(data.dim))
    if target_init is None:
        if system.target.is_mean:
            target = np.array([float(np.mean(data.y[data.r2 == 1]))])
        else:
            target = np.zeros(system.target.dim)
    else:
        target = np.atleast_1d(np.asarray(target_init, dtype=float))
    if system.method == "calibration":
        slope = alpha1[1:]
        a10 = logistic_fit(np.ones((data.n, 1)), r1)
        a20 = logistic_fit(np.ones((int(later.sum()), 1)), r2[later])
        alpha1 = np.concatenate([a10, slope])
        alpha2 = np.concatenate([a20, slope])
    return ParameterState(alpha1, alpha2, gamma, beta, sigma, target)


# ---------------------------------------------------------------------------
# Solver


def _fd_steps(vec: np.ndarray) -> np.ndarray:
    return np.maximum(1e-6 * np.abs(vec), 1e-8)


def _eval_mean(system, vec, data, template):
    try:
        c = system.contributions_vec(vec, data, template)
    except (ValueError, ArithmeticError):
        return None
    f = c.mean(axis=0)
    if not np.all(np.isfinite(f)):
        return None
    return f


def numerical_jacobian(fun: Callable[[np.ndarray], np.ndarray], vec: np.ndarray) -> np.ndarray:
    """Central differences; relative step 1e-6 with absolute floor 1e-8."""
    h = _fd_steps(vec)
    cols = []
    for j in range(len(vec)):
        e = np.zeros_like(vec)
        e[j] = h[j]
        cols.append((fun(vec + e) - fun(vec - e)) / (2 * h[j]))
    return np.stack(cols, axis=-1)


def mean_jacobian(system, vec, data, template):
    def fun(v):
        f = _eval_mean(system, v, data, template)
        if f is None:
            raise ArithmeticError("non-finite moments in Jacobian evaluation")
        return f
    return numerical_jacobian(fun, vec)


def solve(system: MomentSystem, data: Dataset, init: ParameterState, tol: float = 1e-10,
          max_iter: int = 200) -> SolveResult:
    """Damped Newton iteration on the empirical mean of the contributions."""
    if not init.sigma > 0:
        raise ValueError("initial sigma must be positive")
    vec = system.pack(init)
    if not np.all(np.isfinite(vec)):
        raise ValueError("initial parameters must be finite")
    f = _eval_mean(system, vec, data, init)
    if f is None:
        raise SolverError("non-finite residual at the initial point")
    template = init
    res = float(np.max(np.abs(f)))
    path = [res]
    cond = float("nan")
    non_monotone = 0
    it = 0
    while res > tol and it < max_iter:
        it += 1
        try:
            jac = mean_jacobian(system, vec, data, template)
        except ArithmeticError:
            return SolveResult(system.unpack(vec, template), it, res, False, cond, path, non_monotone,
                               "non-finite moments while differencing")
        cond = float(np.linalg.cond(jac))
        if not np.isfinite(cond) or cond > 1e12:
            raise SingularJacobianError(f"singular Jacobian (condition estimate {cond:.3g})")
        step = -np.linalg.solve(jac, f)
        t = 1.0
        best = None
        accepted = False
        for _ in range(31):
            cand = vec + t * step
            fc = _eval_mean(system, cand, data, template)
            if fc is not None:
                rc = float(np.max(np.abs(fc)))
                if best is None or rc < best[0]:
                    best = (rc, cand, fc)
                if rc < res:
                    accepted = True
                    break
            t *= 0.5
        if best is None:
            return SolveResult(system.unpack(vec, template), it, res, False, cond, path, non_monotone,
                               "no finite trial point along the Newton direction")
        if not accepted:
            non_monotone += 1
        res, vec, f = best
        path.append(res)
    converged = res <= tol
    msg = "converged" if converged else f"max_iter={max_iter} reached"
    return SolveResult(system.unpack(vec, template), it, res, converged, cond, path, non_monotone, msg)


def solve_with_fallback(system: MomentSystem, data: Dataset, init: ParameterState, tol: float = 1e-10,
                        max_iter: int = 200) -> SolveResult:
    """Damped Newton, then MINPACK's hybrid Powell method if Newton stalls.

    The fallback is tried from the Newton end point and from the start; a
    root is only accepted when its max residual is within ``tol``.
    """
    res = solve(system, data, init, tol, max_iter)
    if res.converged:
        return res
    template = init

    def fun(v):
        f = _eval_mean(system, v, data, template)
        return np.full(len(v), 1e6) if f is None else f

    for origin in (system.pack(res.params), system.pack(init)):
        try:
            out = optimize.root(fun, origin, method="hybr")
        except (ValueError, ArithmeticError, np.linalg.LinAlgError):
            continue
        if not np.all(np.isfinite(out.x)):
            continue
        f = _eval_mean(system, out.x, data, template)
        if f is None:
            continue
        r = float(np.max(np.abs(f)))
        if r <= tol:
            try:
                state = system.unpack(out.x, template)
            except ValueError:
                continue
            cond = float(np.linalg.cond(mean_jacobian(system, out.x, data, template)))
            return SolveResult(state, res.iterations + int(out.nfev), r, True, cond,
                               res.residual_path + [r], res.non_monotone_steps,
                               "converged (hybrid fallback after Newton stall)")
    return res


# ---------------------------------------------------------------------------
# Variance


def sandwich_variance(system: MomentSystem, data: Dataset, params: ParameterState) -> np.ndarray:
    """A^{-1} B A^{-T} / n for the stacked system at its root."""
    return sandwich_parts(system, data, params)[0]


def sandwich_parts(system, data: Dataset, params: ParameterState):
    """Sandwich covariance plus the derivative matrix A and the contributions."""
    vec = system.pack(params)
    contrib = system.contributions(params, data)
    n = contrib.shape[0]
    a = mean_jacobian(system, vec, data, params)
    b = contrib.T @ contrib / n
    try:
        a_inv = np.linalg.inv(a)
    except np.linalg.LinAlgError as exc:
        raise SingularJacobianError("singular derivative matrix in sandwich") from exc
    if np.linalg.cond(a) > 1e12:
        raise SingularJacobianError("singular derivative matrix in sandwich")
    cov = a_inv @ b @ a_inv.T / n
    cov = 0.5 * (cov + cov.T)
    return cov, a, contrib


@dataclass
class BootstrapResult:
    lower: np.ndarray
    upper: np.ndarray
    sd: np.ndarray
    n_failed: int
    estimates: np.ndarray

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist(), "sd": self.sd.tolist(),
                "n_failed": self.n_failed, "B": int(len(self.estimates) + self.n_failed)}


class BootstrapFailure(SolverError):
    pass


def bootstrap(procedure: Callable[[Dataset], Optional[np.ndarray]], data: Dataset, B: int,
              seed: int) -> BootstrapResult:
    """Nonparametric record bootstrap with percentile intervals.

    ``procedure`` returns the estimate vector or ``None`` (or raises
    :class:`SolverError`) when its solve fails; such resamples are excluded.
    """
    if B < 100:
        raise ValueError("bootstrap needs B >= 100")
    rng = np.random.default_rng(seed)
    draws = []
    failed = 0
    for _ in range(B):
        idx = rng.integers(0, data.n, size=data.n)
        try:
            est = procedure(data.subset(idx))
        except (SolverError, ArithmeticError, ValueError):
            est = None
        if est is None:
            failed += 1
        else:
            draws.append(np.atleast_1d(np.asarray(est, dtype=float)))
    if failed > 0.1 * B:
        raise BootstrapFailure(f"{failed} of {B} bootstrap resamples failed to converge")
    est = np.vstack(draws)
    lower, upper = np.percentile(est, [2.5, 97.5], axis=0)
    return BootstrapResult(lower, upper, est.std(axis=0, ddof=1), failed, est)
