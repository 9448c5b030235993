"""Population-level identification on finite supports.

Given the observed-data tables f(y, R1=1 | x), f(y, R2=1, R1=0 | x) and
f(R2=0 | x), the log ratio of baseline second- to first-call odds
``D(x) = A2(x) - A1(x)`` is the unique root of a strictly decreasing
function ``L``; both propensities and f(y | x) then follow in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .propensity import expit

LOWER_OFFSET = 1e-9


class RestrictionError(ValueError):
    """exp(d) f(y, R1=1 | x) <= f(y, R2=1, R1=0 | x) for some cell."""


class InfeasibleTablesError(ValueError):
    """No d satisfying the restriction reproduces the observed nonresponse odds."""


@dataclass(frozen=True)
class DiscreteJoint:
    x_support: np.ndarray       # (k, p) covariate points
    x_mass: np.ndarray          # (k,)
    y_support: np.ndarray       # (J,)
    f_y_given_x: np.ndarray     # (k, J)
    pi1: np.ndarray             # (k, J)
    pi2: np.ndarray             # (k, J)

    def __post_init__(self):
        k = len(self.x_mass)
        j = len(self.y_support)
        for name in ("f_y_given_x", "pi1", "pi2"):
            if getattr(self, name).shape != (k, j):
                raise ValueError(f"{name} must have shape {(k, j)}")
        if np.any(self.x_mass < 0) or not np.isclose(self.x_mass.sum(), 1.0, atol=1e-12):
            raise ValueError("x masses must be nonnegative and sum to 1")
        if np.any(self.f_y_given_x < 0) or not np.allclose(self.f_y_given_x.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("f(y | x) rows must be nonnegative and sum to 1")
        for name in ("pi1", "pi2"):
            p = getattr(self, name)
            if np.any(p <= 0) or np.any(p >= 1):
                raise ValueError(f"{name} must lie strictly inside (0, 1)")

    @classmethod
    def from_logistic(cls, x_support, x_mass, y_support, f_y_given_x, a1, a2, gamma_table) -> "DiscreteJoint":
        """Build propensities from baselines A1(x), A2(x) and a shared odds ratio table."""
        a1 = np.asarray(a1, dtype=float)[:, None]
        a2 = np.asarray(a2, dtype=float)[:, None]
        g = np.asarray(gamma_table, dtype=float)
        return cls(np.atleast_2d(np.asarray(x_support, dtype=float)), np.asarray(x_mass, dtype=float),
                   np.asarray(y_support, dtype=float), np.asarray(f_y_given_x, dtype=float),
                   expit(a1 + g), expit(a2 + g))

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, cfg: dict) -> "DiscreteJoint":
        if "a1" in cfg:
            return cls.from_logistic(cfg["x_support"], cfg["x_mass"], cfg["y_support"], cfg["f_y_given_x"],
                                     cfg["a1"], cfg["a2"], cfg["gamma_table"])
        return cls(*(np.asarray(cfg[k], dtype=float) for k in
                     ("x_support", "x_mass", "y_support", "f_y_given_x", "pi1", "pi2")))


@dataclass(frozen=True)
class ObservedTables:
    y_support: np.ndarray
    first: np.ndarray           # f(y, R1=1 | x), (k, J)
    second: np.ndarray          # f(y, R2=1, R1=0 | x), (k, J)
    nonresponse: np.ndarray     # f(R2=0 | x), (k,)

    def __post_init__(self):
        total = self.first.sum(axis=1) + self.second.sum(axis=1) + self.nonresponse
        if np.any(self.first < 0) or np.any(self.second < 0) or np.any(self.nonresponse < 0):
            raise ValueError("observed masses must be nonnegative")
        if not np.allclose(total, 1.0, atol=1e-9):
            raise ValueError("observed masses must sum to 1 for every x")

    @property
    def k(self) -> int:
        return self.first.shape[0]

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, cfg: dict) -> "ObservedTables":
        return cls(*(np.asarray(cfg[k], dtype=float) for k in ("y_support", "first", "second", "nonresponse")))


def observed_tables(joint: DiscreteJoint) -> ObservedTables:
    f = joint.f_y_given_x
    first = f * joint.pi1
    second = f * (1.0 - joint.pi1) * joint.pi2
    non = np.sum(f * (1.0 - joint.pi1) * (1.0 - joint.pi2), axis=1)
    return ObservedTables(joint.y_support.copy(), first, second, non)


def _cells(obs: ObservedTables, i: int):
    f1 = obs.first[i]
    f2 = obs.second[i]
    keep = (f1 > 0) | (f2 > 0)
    return f1[keep], f2[keep]


def target_odds(obs: ObservedTables, i: int) -> float:
    """f(R2=0 | R1=0, x) / f(R2=1 | R1=0, x)."""
    return float(obs.nonresponse[i] / obs.second[i].sum())


def restriction_boundary(obs: ObservedTables, i: int) -> float:
    """Smallest admissible d is strictly above this value."""
    f1, f2 = _cells(obs, i)
    with np.errstate(divide="ignore"):
        return float(np.max(np.log(f2) - np.log(f1)))


def L_of_D(obs: ObservedTables, i: int, d: float) -> float:
    """Implied nonresponse odds among first-call nonrespondents at covariate point ``i``."""
    f1, f2 = _cells(obs, i)
    bracket = np.exp(d) * f1 / f2 - 1.0 if np.all(f2 > 0) else None
    if bracket is None or np.any(bracket <= 0):
        raise RestrictionError(f"restriction violated at x index {i} for d = {d}")
    return float(np.sum(f2 / bracket) / f2.sum())


def solve_D(obs: ObservedTables, i: int, bracket_tol: float = 1e-12, audit: bool = False):
    """Unique root of L(d) = target by bisection; with ``audit`` also return the monotonicity grid."""
    target = target_odds(obs, i)
    lo = restriction_boundary(obs, i) + LOWER_OFFSET
    if not np.isfinite(lo):
        raise InfeasibleTablesError(
            f"x index {i}: a cell has second-call mass but no first-call mass; no d satisfies the restriction")
    if target <= 0:
        raise InfeasibleTablesError(f"x index {i}: no nonrespondents, L(d) = 0 has no finite root")
    if L_of_D(obs, i, lo) <= target:
        raise InfeasibleTablesError(
            f"x index {i}: target odds {target:.6g} exceed L at the restriction boundary")
    step = 1.0
    hi = lo + step
    while L_of_D(obs, i, hi) >= target:
        step *= 2.0
        hi = lo + step
        if step > 1e6:
            raise InfeasibleTablesError(f"x index {i}: could not bracket the root")
    a, b = lo, hi
    while b - a > bracket_tol:
        mid = 0.5 * (a + b)
        if mid <= a or mid >= b:
            break
        if L_of_D(obs, i, mid) > target:
            a = mid
        else:
            b = mid
    root = 0.5 * (a + b)
    if not audit:
        return root
    grid = np.linspace(lo, hi, 50)
    values = np.array([L_of_D(obs, i, g) for g in grid])
    return root, grid, values


def monotone_decreasing(values: np.ndarray) -> bool:
    return bool(np.all(np.diff(values) < 0))


def solve_D_all(obs: ObservedTables, bracket_tol: float = 1e-12) -> np.ndarray:
    return np.array([solve_D(obs, i, bracket_tol) for i in range(obs.k)])


def recover_model(obs: ObservedTables, d_table) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reconstruct (pi1, pi2, f(y|x)) from the observed tables and D(x)."""
    d = np.asarray(d_table, dtype=float)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = obs.first / obs.second
        odds2 = np.exp(d) * ratio - 1.0
        odds1 = ratio - np.exp(-d)
        pi2 = odds2 / (1.0 + odds2)
        pi1 = odds1 / (1.0 + odds1)
        f = obs.first / pi1
    support = (obs.first > 0) | (obs.second > 0)
    if np.any(~((pi1 > 0) & (pi1 < 1) & (pi2 > 0) & (pi2 < 1))[support]):
        raise RestrictionError("a reconstructed propensity falls outside (0, 1)")
    pi1 = np.where(support, pi1, np.nan)
    pi2 = np.where(support, pi2, np.nan)
    f = np.where(support, f, 0.0)
    f = f / f.sum(axis=1, keepdims=True)
    return pi1, pi2, f


def check_restriction(obs: ObservedTables, d) -> tuple[bool, float]:
    """Whether exp(d) f(y,R1=1|x) > f(y,R2=1,R1=0|x) on every positive cell, and the worst margin."""
    d = np.broadcast_to(np.asarray(d, dtype=float), (obs.k,))[:, None]
    support = (obs.first > 0) | (obs.second > 0)
    margin = np.exp(d) * obs.first - obs.second
    worst = float(np.min(margin[support]))
    return worst > 0, worst


def restriction_cells(obs: ObservedTables, d) -> list[dict]:
    """Cells violating the restriction at ``d``."""
    d = np.broadcast_to(np.asarray(d, dtype=float), (obs.k,))
    out = []
    for i in range(obs.k):
        for j, y in enumerate(obs.y_support):
            if obs.first[i, j] > 0 or obs.second[i, j] > 0:
                margin = np.exp(d[i]) * obs.first[i, j] - obs.second[i, j]
                if margin <= 0:
                    out.append({"x_index": i, "y": float(y), "margin": float(margin)})
    return out


def infeasibility_report(obs: ObservedTables) -> list[dict]:
    """Per covariate point: restriction boundary, target odds and the margin of L above the target."""
    out = []
    for i in range(obs.k):
        entry = {"x_index": i, "target_odds": target_odds(obs, i)}
        lo = restriction_boundary(obs, i)
        entry["boundary"] = lo if np.isfinite(lo) else None
        blocked = [{"y": float(y), "first": float(a), "second": float(b), "margin": -float(b)}
                   for y, a, b in zip(obs.y_support, obs.first[i], obs.second[i]) if a == 0 < b]
        entry["cells_failing_for_every_d"] = blocked
        if np.isfinite(lo) and not blocked:
            try:
                entry["L_minus_target_at_boundary"] = L_of_D(obs, i, lo + LOWER_OFFSET) - entry["target_odds"]
            except RestrictionError:
                entry["L_minus_target_at_boundary"] = None
        entry["feasible"] = bool(not blocked and entry.get("L_minus_target_at_boundary", -1) is not None
                                 and entry.get("L_minus_target_at_boundary", -1) > 0 and entry["target_odds"] > 0)
        out.append(entry)
    return out


def random_joint(rng: np.random.Generator, n_x: int = 3, y_support=(0.0, 1.0, 2.0),
                 gamma: Optional[float] = None) -> DiscreteJoint:
    """Random joint satisfying the callback, positivity and stableness conditions."""
    y = np.asarray(y_support, dtype=float)
    x_support = np.column_stack([np.ones(n_x), np.arange(n_x, dtype=float)])
    x_mass = rng.dirichlet(np.ones(n_x))
    f = rng.dirichlet(np.ones(len(y)), size=n_x)
    f = 0.9 * f + 0.1 / len(y)
    a1 = rng.uniform(-1.5, 1.5, n_x)
    a2 = rng.uniform(-1.5, 1.5, n_x)
    g = rng.uniform(-1.0, 1.0, n_x) if gamma is None else np.full(n_x, gamma)
    table = g[:, None] * (y[None, :] - y[0])
    return DiscreteJoint.from_logistic(x_support, x_mass, y, f, a1, a2, table)


def binary_toy(pi1_coef=(-0.5, 0.7), pi2_coef=(0.3, 0.7), p_y1: float = 0.4) -> DiscreteJoint:
    """No covariates, binary outcome: pi_k = expit(a_k + g y)."""
    f = np.array([[1.0 - p_y1, p_y1]])
    y = np.array([0.0, 1.0])
    pi1 = expit(pi1_coef[0] + pi1_coef[1] * y)[None, :]
    pi2 = expit(pi2_coef[0] + pi2_coef[1] * y)[None, :]
    return DiscreteJoint(np.ones((1, 1)), np.ones(1), y, f, pi1, pi2)


def identify(obs: ObservedTables, bracket_tol: float = 1e-12) -> dict:
    """Full identification report for every covariate point."""
    d_table = []
    audits = []
    for i in range(obs.k):
        root, grid, values = solve_D(obs, i, bracket_tol, audit=True)
        d_table.append(root)
        audits.append({"x_index": i, "grid": grid.tolist(), "L": values.tolist(),
                       "strictly_decreasing": monotone_decreasing(values)})
    d_table = np.array(d_table)
    pi1, pi2, f = recover_model(obs, d_table)
    ok, margin = check_restriction(obs, d_table)
    return {
        "D": d_table.tolist(),
        "pi1": np.nan_to_num(pi1, nan=-1.0).tolist(),
        "pi2": np.nan_to_num(pi2, nan=-1.0).tolist(),
        "f_y_given_x": f.tolist(),
        "restriction": {"satisfied": ok, "worst_margin": margin},
        "monotonicity_audit": audits,
    }
