"""Data-generating processes, ground truth and replication studies.

The joint law is built from the two call propensities and the second-call
respondent law ``f2 = N(beta' W2, sigma^2)``: marginally

    f(y | x) proportional to f2(y | x) / {pi2(x, y) (1 - pi1(x, y))}.

With ``pi1 = expit(a1 + g y)`` and ``pi2 = expit(a2 + g2 y)`` the inverse
weight expands into four exponentials in ``y``, so ``f(y | x)`` is a finite
mixture of shifted normals. Samples and ground truth use that mixture; the
gridded density of :func:`conditional_outcome_density` is kept as an
independent check.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import logsumexp

from .data import Dataset, ParameterState, WorkingModelSpec
from .engine import MomentSystem, SolverError, sandwich_parts, solve_with_fallback, starting_values
from .estimators import Z95
from .propensity import expit

log = logging.getLogger(__name__)

WORKERS_ENV = "CALLBACK_MNAR_WORKERS"
DESIGNS = ("linear", "squares")


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    alpha1: tuple[float, ...]
    alpha2: tuple[float, ...]
    beta: tuple[float, ...]
    gamma: float
    sigma: float
    w1: str = "linear"
    w2: str = "linear"
    n_covariates: int = 2
    covariate_law: str = "uniform(-1,1)"
    sensitivity_delta: float = 0.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.w1 not in DESIGNS or self.w2 not in DESIGNS:
            raise ValueError(f"designs must be in {DESIGNS}")
        if self.covariate_law != "uniform(-1,1)":
            raise ValueError("only independent uniform(-1,1) covariates are supported")
        d = self.n_covariates + 1
        for name in ("alpha1", "alpha2", "beta"):
            if len(getattr(self, name)) != d:
                raise ValueError(f"{name} must have length {d}")

    @property
    def d(self) -> int:
        return self.n_covariates + 1

    def with_delta(self, delta: float) -> "ScenarioSpec":
        return replace(self, sensitivity_delta=float(delta))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, cfg: dict) -> "ScenarioSpec":
        cfg = dict(cfg)
        for key in ("alpha1", "alpha2", "beta"):
            cfg[key] = tuple(float(v) for v in cfg[key])
        cfg.setdefault("name", "custom")
        return cls(**cfg)


SCENARIOS: dict[str, ScenarioSpec] = {
    "TT": ScenarioSpec("TT", (-1, 0.5, 0.2), (1, 0.5, 0.2), (2.5, 2.3, 1.6), 0.16, 1.2, "linear", "linear"),
    "FT": ScenarioSpec("FT", (-0.3, -0.7, 0.7), (-0.3, 1.9, 0.9), (-1, 5.4, 4), 0.1, 2.0, "squares", "linear"),
    "TF": ScenarioSpec("TF", (-1, 1, -0.1), (0.5, 1, -0.1), (-0.5, 5, -1), 0.5, 0.4, "linear", "squares"),
    "FF": ScenarioSpec("FF", (-0.3, -0.5, 1), (-0.4, 0.8, 0), (-1.5, 4, 3), 0.25, 0.25, "squares", "squares"),
    "FIG1-i": ScenarioSpec("FIG1-i", (-0.4, 0.8), (-0.4, 0.8), (-1.6, 0.6), 0.5, 0.6, n_covariates=1),
    "FIG1-ii": ScenarioSpec("FIG1-ii", (-0.4, -0.8), (-0.4, 0.8), (-1.6, 0.6), 0.5, 0.6, n_covariates=1),
}


def get_scenario(name: str) -> ScenarioSpec:
    try:
        return SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None


def _design(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "linear":
        return x
    return np.hstack([x[:, :1], x[:, 1:] ** 2])


def _predictors(scenario: ScenarioSpec, x: np.ndarray):
    x = np.atleast_2d(x)
    a1 = x @ np.asarray(scenario.alpha1)
    a2 = _design(x, scenario.w1) @ np.asarray(scenario.alpha2)
    m = _design(x, scenario.w2) @ np.asarray(scenario.beta)
    return a1, a2, m


def true_propensities(scenario: ScenarioSpec, x, y):
    """Data-generating (pi1, pi2) at rows ``x`` and outcomes ``y``."""
    a1, a2, _ = _predictors(scenario, x)
    g = scenario.gamma
    pi1 = expit(a1 + g * y)
    pi2 = expit(a2 + (g + scenario.sensitivity_delta) * y)
    return pi1, pi2


def mixture_components(scenario: ScenarioSpec, x):
    """Log-probabilities (n, 4) and mean shifts (4,) of f(y | x) as a normal mixture.

    Components correspond to the response strata: 0 second-call
    respondents, 1 and 3 first-call respondents, 2 nonrespondents.
    """
    a1, a2, m = _predictors(scenario, x)
    g = scenario.gamma
    g2 = g + scenario.sensitivity_delta
    dlt = scenario.sensitivity_delta
    s2 = scenario.sigma ** 2
    slopes = np.array([0.0, g, -g2, -dlt])
    intercepts = np.stack([np.zeros_like(a1), a1, -a2, a1 - a2], axis=1)
    logw = intercepts + slopes[None, :] * m[:, None] + 0.5 * slopes[None, :] ** 2 * s2
    logp = logw - logsumexp(logw, axis=1, keepdims=True)
    return logp, slopes * s2, m


def conditional_mean(scenario: ScenarioSpec, x) -> np.ndarray:
    """E(Y | X = x) under the data-generating law."""
    logp, shifts, m = mixture_components(scenario, x)
    return m + np.exp(logp) @ shifts


def conditional_outcome_density(scenario: ScenarioSpec, x, points: int = 4096, max_doublings: int = 4):
    """Tabulated f(y | x) on a uniform grid, normalized by the trapezoid rule."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    _, _, m = _predictors(scenario, x)
    m = float(m[0])
    s = scenario.sigma
    half = 10.0 * s
    for _ in range(max_doublings + 1):
        grid = np.linspace(m - half, m + half, points)
        pi1, pi2 = true_propensities(scenario, np.repeat(x, points, axis=0), grid)
        logf2 = -0.5 * ((grid - m) / s) ** 2
        dens = np.exp(logf2 - np.log(pi2) - np.log1p(-pi1))
        peak = dens.max()
        if dens[0] < 1e-12 * peak and dens[-1] < 1e-12 * peak:
            dens = dens / trapezoid(dens, grid)
            return grid, dens
        half *= 2.0
    raise ValueError("outcome density not normalizable on the grid; pathological parameters")


def sample_dataset(scenario: ScenarioSpec, n: int, seed, *, keep_full: bool = False,
                   covariates: Optional[np.ndarray] = None):
    """Draw ``n`` records; with ``keep_full`` also return the unblanked outcomes.

    ``covariates`` (n, n_covariates) replaces the default uniform draws,
    which lets callers impose their own covariate law.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    if covariates is None:
        covariates = rng.uniform(-1.0, 1.0, size=(n, scenario.n_covariates))
    covariates = np.asarray(covariates, dtype=float)
    if covariates.shape != (n, scenario.n_covariates):
        raise ValueError(f"covariates must have shape ({n}, {scenario.n_covariates})")
    x = np.hstack([np.ones((n, 1)), covariates])
    logp, shifts, m = mixture_components(scenario, x)
    cum = np.cumsum(np.exp(logp), axis=1)
    u = rng.uniform(size=n)
    comp = np.minimum((u[:, None] > cum).sum(axis=1), 3)
    y = m + shifts[comp] + scenario.sigma * rng.standard_normal(n)
    pi1, pi2 = true_propensities(scenario, x, y)
    r1 = (rng.uniform(size=n) < pi1).astype(int)
    r2_later = (rng.uniform(size=n) < pi2).astype(int)
    r2 = np.maximum(r1, r2_later)
    names = ["const"] + [f"x{j}" for j in range(1, scenario.d)]
    ds = Dataset(x, np.where(r2 == 1, y, np.nan), r1, r2, names)
    if keep_full:
        return ds, y
    return ds


def _legendre_grid(scenario: ScenarioSpec, order: int = 64):
    t, w = np.polynomial.legendre.leggauss(order)
    k = scenario.n_covariates
    mesh = np.meshgrid(*([t] * k), indexing="ij")
    wmesh = np.meshgrid(*([w] * k), indexing="ij")
    pts = np.column_stack([g.ravel() for g in mesh])
    wts = np.prod(np.column_stack([g.ravel() for g in wmesh]), axis=1) / 2.0 ** k
    x = np.hstack([np.ones((len(pts), 1)), pts])
    return x, wts


def true_mean(scenario: ScenarioSpec, order: int = 64) -> float:
    """E(Y) by Gauss-Legendre quadrature over the uniform covariates."""
    x, wts = _legendre_grid(scenario, order)
    return float(wts @ conditional_mean(scenario, x))


def true_mean_from_tables(scenario: ScenarioSpec, order: int = 16, points: int = 2048) -> float:
    """E(Y) from the gridded densities; slow, used as an independent check."""
    x, wts = _legendre_grid(scenario, order)
    vals = np.empty(len(x))
    for i in range(len(x)):
        grid, dens = conditional_outcome_density(scenario, x[i:i + 1], points=points)
        vals[i] = trapezoid(grid * dens, grid)
    return float(wts @ vals)


def true_nonrespondent_mean(scenario: ScenarioSpec, order: int = 64) -> float:
    """E(Y | R2 = 0): the nonrespondent stratum is the third mixture component."""
    x, wts = _legendre_grid(scenario, order)
    logp, shifts, m = mixture_components(scenario, x)
    p0 = np.exp(logp[:, 2])
    return float(wts @ (p0 * (m + shifts[2])) / (wts @ p0))


def response_rate(scenario: ScenarioSpec, order: int = 64) -> float:
    x, wts = _legendre_grid(scenario, order)
    logp, _, _ = mixture_components(scenario, x)
    return float(1.0 - wts @ np.exp(logp[:, 2]))


def true_parameters(scenario: ScenarioSpec):
    """Working-model parameter values that are correct for this scenario, where they exist."""
    return ParameterState(scenario.alpha1, scenario.alpha2, [scenario.gamma], scenario.beta, scenario.sigma,
                          [true_mean(scenario)])


# ---------------------------------------------------------------------------
# Replications


ESTIMATION_SPEC = WorkingModelSpec()


class ScenarioUnusableError(SolverError):
    """Too many non-convergent fits; the computed metrics are still attached."""

    def __init__(self, message: str, metrics: "ReplicationMetrics"):
        super().__init__(message)
        self.metrics = metrics


@dataclass
class ReplicationMetrics:
    scenario: str
    n: int
    reps: int
    seed: int
    truth: dict[str, float]
    rows: list[dict] = field(default_factory=list)
    estimates: list[dict] = field(default_factory=list)

    def row(self, method: str, parameter: str) -> dict:
        for r in self.rows:
            if r["method"] == method and r["parameter"] == parameter:
                return r
        raise KeyError((method, parameter))

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "n": self.n, "reps": self.reps, "seed": self.seed,
                "truth": self.truth, "metrics": self.rows}


def fit_point(method: str, data: Dataset, spec: WorkingModelSpec = ESTIMATION_SPEC,
              tol: float = 1e-10, max_iter: int = 200) -> Optional[dict]:
    """Fit one method and return mu, gamma and their sandwich SEs, or None on failure."""
    try:
        system = MomentSystem(method, spec, data.dim)
        res = solve_with_fallback(system, data, starting_values(system, data), tol, max_iter)
        if not res.converged:
            return None
        cov, _, _ = sandwich_parts(system, data, res.params)
    except (SolverError, ArithmeticError, np.linalg.LinAlgError, ValueError):
        return None
    labels = system.free_labels()
    vec = system.pack(res.params)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    gi = labels.index("gamma[0]")
    out = {"mu": float(vec[-1]), "se_mu": float(se[-1]), "gamma": float(vec[gi]), "se_gamma": float(se[gi]),
           "iterations": res.iterations}
    if not all(np.isfinite(v) for v in out.values()):
        return None
    return out


def _one_replication(args):
    scenario, methods, n, seed_seq, tol = args
    data = sample_dataset(scenario, n, seed_seq)
    return {m: fit_point(m, data, tol=tol) for m in methods}


def _workers(workers: Optional[int]) -> int:
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get(WORKERS_ENV)
    return max(1, int(env)) if env else 1


def run_replications(scenario: ScenarioSpec, methods: Sequence[str], reps: int, n: int, seed: int,
                     workers: Optional[int] = None, tol: float = 1e-10,
                     max_fail_fraction: float = 0.2) -> ReplicationMetrics:
    """Monte Carlo bias / SD / SE / coverage for each method's mu and gamma."""
    if reps < 1:
        raise ValueError("reps must be at least 1")
    children = np.random.SeedSequence(seed).spawn(reps)
    tasks = [(scenario, tuple(methods), n, children[i], tol) for i in range(reps)]
    k = _workers(workers)
    if k == 1:
        results = [_one_replication(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=k) as pool:
            results = list(pool.map(_one_replication, tasks, chunksize=max(1, reps // (4 * k))))
    truth = {"mu": true_mean(scenario), "gamma": scenario.gamma}
    metrics = ReplicationMetrics(scenario.name, n, reps, seed, truth)
    for i, res in enumerate(results):
        for m in methods:
            r = res[m]
            metrics.estimates.append({"replication": i, "method": m, **(r or {"failed": True})})
    unusable = []
    for m in methods:
        fits = [res[m] for res in results if res[m] is not None]
        n_fail = reps - len(fits)
        if n_fail > max_fail_fraction * reps:
            unusable.append(f"{m} ({n_fail}/{reps} fits failed)")
        for par in ("mu", "gamma"):
            est = np.array([f[par] for f in fits])
            se = np.array([f["se_" + par] for f in fits])
            t = truth[par]
            cover = np.abs(est - t) <= Z95 * se
            nan = float("nan")
            metrics.rows.append({
                "scenario": scenario.name, "method": m, "parameter": par,
                "bias": float(np.mean(est - t)) if len(est) else nan,
                "mc_sd": float(np.std(est, ddof=1)) if len(est) > 1 else nan,
                "mean_se": float(np.mean(se)) if len(est) else nan,
                "coverage": float(np.mean(cover)) if len(est) else nan,
                "n_fail": int(n_fail),
            })
    if unusable:
        raise ScenarioUnusableError(f"scenario {scenario.name} unusable: " + ", ".join(unusable), metrics)
    return metrics
