"""Outcome-mean and general-functional estimators with sandwich inference."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .data import Dataset, ParameterState, WorkingModelSpec
from .engine import (
    MEAN,
    MomentSystem,
    SolverError,
    TargetFunctional,
    bootstrap,
    sandwich_parts,
    solve,
    solve_with_fallback,
    starting_values,
)

Z95 = 1.959964
MEAN_METHODS = ("ipw", "reg", "dr", "cc", "calibration")


class NonConvergenceError(SolverError):
    def __init__(self, message: str, report: "EstimateReport"):
        super().__init__(message)
        self.report = report


@dataclass
class EstimateReport:
    method: str
    labels: list[str]
    estimate: np.ndarray
    se: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    nuisance: dict[str, dict[str, float]]
    diagnostics: dict
    spec_fingerprint: str
    n: int
    converged: bool = True
    bootstrap: Optional[dict] = None
    covariance: Optional[np.ndarray] = field(default=None, repr=False)
    # per-record influence values of the target block, used for derived quantities
    influence: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "converged": self.converged,
            "n": self.n,
            "labels": list(self.labels),
            "estimate": _list(self.estimate),
            "se": _list(self.se),
            "ci_lower": _list(self.ci_lower),
            "ci_upper": _list(self.ci_upper),
            "bootstrap": self.bootstrap,
            "nuisance": self.nuisance,
            "diagnostics": self.diagnostics,
            "spec_fingerprint": self.spec_fingerprint,
        }


def _list(a):
    return None if a is None else [float(v) for v in np.atleast_1d(a)]


def _normal_ci(est, se):
    return est - Z95 * se, est + Z95 * se


class TargetOnlySystem:
    """Moment system ``m(x, y; theta)`` for data without nonrespondents."""

    method = "complete"

    def __init__(self, target: TargetFunctional):
        self.target = target
        self.layout = [("target", target.dim)]
        self.dim = self.n_free = target.dim

    def pack(self, state):
        return np.asarray(state.target, dtype=float)

    def unpack(self, vec, template):
        out = template.copy()
        out.target = np.asarray(vec, dtype=float)
        return out

    def contributions(self, state, data):
        return self.target.values(data.x, data.y, state.target)

    def contributions_vec(self, vec, data, template):
        return self.contributions(self.unpack(vec, template), data)

    def free_labels(self):
        return [f"target[{j}]" for j in range(self.target.dim)]


def _target_labels(target: TargetFunctional) -> list[str]:
    if target.is_mean:
        return ["mu"]
    return [f"theta[{j}]" for j in range(target.dim)]


def _complete_data_report(data, spec, target, method, tol, max_iter, init):
    system = TargetOnlySystem(target)
    start = np.mean(data.y) if (init is None and target.is_mean) else (init if init is not None else np.zeros(target.dim))
    state = ParameterState(np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1), 1.0, start)
    res = solve(system, data, state, tol, max_iter)
    if not res.converged:
        raise SolverError(f"complete-data solve did not converge: {res.message}")
    return _assemble(method, system, data, spec, target, res, note="no nonrespondents: no adjustment needed")


def _assemble(method, system, data, spec, target, res, note=""):
    cov, a, psi = sandwich_parts(system, data, res.params)
    q = target.dim
    est = np.asarray(res.params.target, dtype=float)
    se = np.sqrt(np.clip(np.diag(cov)[-q:], 0.0, None))
    lo, hi = _normal_ci(est, se)
    labels = system.free_labels()
    vec = system.pack(res.params)
    sds = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    nuisance = {lab: {"estimate": float(v), "se": float(s)}
                for lab, v, s in zip(labels[:-q], vec[:-q], sds[:-q])}
    # per-record influence values -A^{-1} psi_i of the target block
    influence = -np.linalg.solve(a, psi.T).T[:, -q:]
    diag = res.diagnostics()
    if note:
        diag["note"] = note
    return EstimateReport(method, _target_labels(target), est, se, lo, hi, nuisance, diag,
                          spec.fingerprint(), data.n, True, None, cov, influence)


def _fit(method, data, spec, target, tol, max_iter, init=None):
    system = MomentSystem(method, spec, data.dim, target)
    start = starting_values(system, data, init)
    res = solve_with_fallback(system, data, start, tol, max_iter)
    return system, res


def estimate_mean(method: str, data: Dataset, spec: Optional[WorkingModelSpec] = None, *,
                  tol: float = 1e-10, max_iter: int = 200, bootstrap_B: int = 0,
                  seed: int = 0) -> EstimateReport:
    """Estimate E(Y) by ``ipw``, ``reg``, ``dr``, ``cc`` or ``calibration``."""
    spec = spec or WorkingModelSpec()
    if method not in MEAN_METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {MEAN_METHODS}")
    if method == "cc":
        return _complete_case(data, spec)
    if not np.any(data.r2 == 0):
        return _complete_data_report(data, spec, MEAN, method, tol, max_iter, None)
    report = _estimate(method, data, spec, MEAN, tol, max_iter)
    if bootstrap_B:
        def procedure(d):
            system, res = _fit(method, d, spec, MEAN, tol, max_iter)
            return res.params.target if res.converged else None
        boot = bootstrap(procedure, data, bootstrap_B, seed)
        report.bootstrap = boot.to_dict()
    return report


def _estimate(method, data, spec, target, tol, max_iter, init=None):
    system, res = _fit(method, data, spec, target, tol, max_iter, init)
    if not res.converged:
        report = EstimateReport(method, _target_labels(target), None, None, None, None, {},
                                res.diagnostics(), spec.fingerprint(), data.n, converged=False)
        raise NonConvergenceError(f"{method} solve did not converge: {res.message}", report)
    return _assemble(method, system, data, spec, target, res)


def _complete_case(data: Dataset, spec: WorkingModelSpec) -> EstimateReport:
    y = data.y[data.r2 == 1]
    k = len(y)
    est = np.array([y.mean()])
    se = np.array([y.std(ddof=1) / np.sqrt(k)]) if k > 1 else np.array([np.nan])
    lo, hi = _normal_ci(est, se)
    infl = np.zeros((data.n, 1))
    return EstimateReport("cc", ["mu"], est, se, lo, hi, {}, {"n_respondents": k}, spec.fingerprint(),
                          data.n, True, None, np.atleast_2d(se ** 2), infl)


def estimate_functional(data: Dataset, spec: Optional[WorkingModelSpec], m: Callable, dim: int,
                        method: str = "dr", *, init: Optional[Sequence[float]] = None,
                        tol: float = 1e-10, max_iter: int = 200, name: str = "functional") -> EstimateReport:
    """Estimate theta solving E{m(X, Y; theta)} = 0.

    ``m(x, y, theta)`` must accept ``x`` of shape (N, d) and ``y`` of shape
    (N,) and return an (N, dim) array.
    """
    spec = spec or WorkingModelSpec()
    if method not in ("ipw", "reg", "dr"):
        raise ValueError("functional estimation supports ipw, reg and dr")
    target = TargetFunctional(m, dim, name)
    if not np.any(data.r2 == 0):
        return _complete_data_report(data, spec, target, method, tol, max_iter,
                                     np.zeros(dim) if init is None else np.asarray(init, float))
    return _estimate(method, data, spec, target, tol, max_iter, init)


def nonrespondent_mean(data: Dataset, spec: Optional[WorkingModelSpec], mu_report: EstimateReport) -> EstimateReport:
    """E(Y | R2 = 0) = (mu n - sum of observed y) / #nonrespondents, with delta-method SE."""
    spec = spec or WorkingModelSpec()
    n = data.n
    miss = data.r2 == 0
    n0 = int(miss.sum())
    if n0 == 0:
        raise ValueError("no nonrespondents")
    if not mu_report.converged or mu_report.influence is None:
        raise ValueError("a converged mean estimate with influence values is required")
    mu = float(mu_report.estimate[0])
    yo = data.y_observed
    r2 = data.r2.astype(float)
    a = float(np.mean(r2 * yo))
    p = float(np.mean(r2))
    nu = (mu - a) / (1.0 - p)
    # influence of nu = (mu - a) / (1 - p) through (mu, a, p)
    inf = (mu_report.influence[:, 0] - (r2 * yo - a) + nu * (r2 - p)) / (1.0 - p)
    se = np.array([np.sqrt(np.mean(inf ** 2) / n)])
    est = np.array([nu])
    lo, hi = _normal_ci(est, se)
    return EstimateReport(f"{mu_report.method}:nonrespondent_mean", ["mu_nonrespondent"], est, se, lo, hi,
                          {}, {"n_nonrespondents": n0, "response_rate": p}, spec.fingerprint(), n, True,
                          None, np.atleast_2d(se ** 2), inf[:, None])
