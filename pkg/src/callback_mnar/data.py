"""Datasets, working-model specifications and parameter containers.

A dataset holds one row per sampled unit: covariates ``x`` (first column is
the constant 1 by convention), an outcome ``y`` that is observed only when the
unit eventually responded, and the two call indicators ``r1`` (responded at
the first call) and ``r2`` (responded by the second call).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class ObservationRecord:
    x: tuple[float, ...]
    y: Optional[float]
    r1: int
    r2: int


@dataclass(frozen=True)
class Violation:
    index: int
    rule: str

    def __str__(self) -> str:
        return f"record {self.index}: {self.rule}"


class Dataset:
    """Immutable column store of callback records.

    ``y`` is kept together with an explicit observed mask (``r2 == 1``);
    unobserved entries are stored as NaN only so that an accidental read
    poisons any sum instead of silently contributing a number. Use
    :attr:`y_observed` inside moment functions.
    """

    def __init__(
        self,
        x: np.ndarray,
        y: Sequence[Optional[float]] | np.ndarray,
        r1: Sequence[int] | np.ndarray,
        r2: Sequence[int] | np.ndarray,
        covariate_names: Optional[Sequence[str]] = None,
    ):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.ndim != 2:
            raise ValueError("x must be two-dimensional")
        n = x.shape[0]
        r1 = np.asarray(r1, dtype=int).reshape(-1)
        r2 = np.asarray(r2, dtype=int).reshape(-1)
        y = np.array([np.nan if v is None else v for v in y], dtype=float) \
            if not isinstance(y, np.ndarray) else np.asarray(y, dtype=float).reshape(-1)
        if not (len(y) == len(r1) == len(r2) == n):
            raise ValueError("x, y, r1 and r2 must have the same number of rows")
        if covariate_names is None:
            covariate_names = ["const"] + [f"x{j}" for j in range(1, x.shape[1])]
        if len(covariate_names) != x.shape[1]:
            raise ValueError("covariate_names length does not match x columns")
        y = np.where(r2 == 1, y, np.nan)
        for arr in (x, y, r1, r2):
            arr.setflags(write=False)
        self.x = x
        self.y = y
        self.r1 = r1
        self.r2 = r2
        self.covariate_names = tuple(covariate_names)

    @classmethod
    def from_records(cls, records: Iterable[ObservationRecord],
                     covariate_names: Optional[Sequence[str]] = None) -> "Dataset":
        records = list(records)
        if not records:
            raise ValueError("empty dataset")
        dims = {len(r.x) for r in records}
        if len(dims) != 1:
            raise ValueError("records have different covariate dimensions")
        x = np.array([r.x for r in records], dtype=float)
        y = np.array([np.nan if r.y is None else r.y for r in records], dtype=float)
        return cls(x, y, [r.r1 for r in records], [r.r2 for r in records], covariate_names)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def y_observed(self) -> np.ndarray:
        """Outcome with unobserved entries replaced by 0; always paired with an r2 factor."""
        return np.where(self.r2 == 1, np.nan_to_num(self.y, nan=0.0), 0.0)

    def records(self) -> Iterator[ObservationRecord]:
        for i in range(self.n):
            yield self.record(i)

    def record(self, i: int) -> ObservationRecord:
        y = float(self.y[i]) if self.r2[i] == 1 else None
        return ObservationRecord(tuple(float(v) for v in self.x[i]), y, int(self.r1[i]), int(self.r2[i]))

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.r1[idx], self.r2[idx], self.covariate_names)

    def strata_counts(self) -> dict[str, int]:
        first = int(np.sum(self.r1 == 1))
        second = int(np.sum((self.r1 == 0) & (self.r2 == 1)))
        non = int(np.sum(self.r2 == 0))
        return {"first_call": first, "second_call": second, "nonrespondent": non}

    def __len__(self) -> int:
        return self.n


def validate_dataset(ds: Dataset | Sequence[ObservationRecord]) -> list[Violation]:
    """Check record and dataset invariants; never raises."""
    if isinstance(ds, Dataset):
        records = list(ds.records())
        # Dataset() already blanks y where r2 = 0, so look at the raw columns too
        raw_y = ds.y
    else:
        records = list(ds)
        raw_y = None
    out: list[Violation] = []
    if not records:
        return [Violation(-1, "empty dataset")]
    dim0 = len(records[0].x)
    for i, rec in enumerate(records):
        if rec.r1 not in (0, 1) or rec.r2 not in (0, 1):
            out.append(Violation(i, "response indicators must be 0 or 1"))
        if rec.r1 > rec.r2:
            out.append(Violation(i, "callback monotonicity"))
        if rec.r2 == 1 and (rec.y is None or (raw_y is not None and np.isnan(raw_y[i]))):
            out.append(Violation(i, "outcome missing for respondent"))
        if rec.r2 == 0 and rec.y is not None:
            out.append(Violation(i, "outcome present for nonrespondent"))
        if rec.y is not None and not np.isfinite(rec.y):
            out.append(Violation(i, "outcome not finite"))
        if len(rec.x) != dim0:
            out.append(Violation(i, "covariate dimension mismatch"))
        if not all(np.isfinite(v) for v in rec.x):
            out.append(Violation(i, "covariate not finite"))
    r1 = np.array([r.r1 for r in records])
    r2 = np.array([r.r2 for r in records])
    if not np.any(r1 == 1):
        out.append(Violation(-1, "no first-call respondents"))
    if not np.any((r1 == 0) & (r2 == 1)):
        out.append(Violation(-1, "no second-call respondents"))
    if not np.any(r2 == 0):
        out.append(Violation(-1, "no nonrespondents"))
    return out


# ---------------------------------------------------------------------------
# Feature maps


@dataclass(frozen=True)
class FeatureMap:
    """Named, vectorized design map.

    Covariate maps take ``x`` of shape (n, d) and return (n, p). Outcome maps
    (``takes_y``) take ``x`` of shape (n, d) and ``y`` of shape (n,) or (n, k)
    and return ``y.shape + (q,)``.
    """

    name: str
    fn: Callable[..., np.ndarray]
    takes_y: bool = False

    def __call__(self, x, y=None):
        x = np.asarray(x, dtype=float)
        if self.takes_y:
            return self.fn(x, np.asarray(y, dtype=float))
        return self.fn(x)

    def dim(self, d: int) -> int:
        x = np.ones((1, d))
        if self.takes_y:
            return self.fn(x, np.ones(1)).shape[-1]
        return self.fn(x).shape[-1]


def _linear(x):
    return x


def _linear_squares(x):
    return np.hstack([x, x[:, 1:] ** 2])


def _squares(x):
    return np.hstack([x[:, :1], x[:, 1:] ** 2])


def _intercept(x):
    return x[:, :1]


def _gamma_linear(x, y):
    return y[..., None]


def _gamma_quadratic(x, y):
    return np.stack([y, y * y], axis=-1)


COVARIATE_MAPS: dict[str, FeatureMap] = {
    "linear": FeatureMap("linear", _linear),
    "linear+squares": FeatureMap("linear+squares", _linear_squares),
    "squares": FeatureMap("squares", _squares),
    "intercept-only": FeatureMap("intercept-only", _intercept),
}

ODDS_RATIO_MAPS: dict[str, FeatureMap] = {
    "y": FeatureMap("y", _gamma_linear, takes_y=True),
    "y+y^2": FeatureMap("y+y^2", _gamma_quadratic, takes_y=True),
}


def covariate_map(name: str) -> FeatureMap:
    try:
        return COVARIATE_MAPS[name]
    except KeyError:
        raise ValueError(f"unknown covariate design {name!r}; choose from {sorted(COVARIATE_MAPS)}") from None


def odds_ratio_map(name: str) -> FeatureMap:
    try:
        return ODDS_RATIO_MAPS[name]
    except KeyError:
        raise ValueError(f"unknown odds-ratio design {name!r}; choose from {sorted(ODDS_RATIO_MAPS)}") from None


@dataclass(frozen=True)
class WorkingModelSpec:
    """Working models for the two baseline propensities, the odds ratio and f2.

    ``v1``, ``v2`` and ``u`` are instrument maps; ``None`` means the derivative
    of the corresponding linear predictor (the design itself).
    """

    a1_design: FeatureMap = field(default_factory=lambda: COVARIATE_MAPS["linear"])
    a2_design: FeatureMap = field(default_factory=lambda: COVARIATE_MAPS["linear"])
    gamma_design: FeatureMap = field(default_factory=lambda: ODDS_RATIO_MAPS["y"])
    outcome_design: FeatureMap = field(default_factory=lambda: COVARIATE_MAPS["linear"])
    v1: Optional[FeatureMap] = None
    v2: Optional[FeatureMap] = None
    u: Optional[FeatureMap] = None
    tilt_method: str = "auto"
    quadrature_order: int = 64

    def __post_init__(self):
        if not self.gamma_design.takes_y:
            raise ValueError("gamma_design must be a map of (x, y)")
        if self.u is not None and not self.u.takes_y:
            raise ValueError("u must be a map of (x, y)")
        if self.tilt_method not in ("auto", "quadrature"):
            raise ValueError("tilt_method must be 'auto' or 'quadrature'")

    @classmethod
    def from_names(cls, a1: str = "linear", a2: str = "linear", gamma: str = "y",
                   outcome: str = "linear", **kw) -> "WorkingModelSpec":
        return cls(covariate_map(a1), covariate_map(a2), odds_ratio_map(gamma),
                   covariate_map(outcome), **kw)

    @property
    def linear_tilt(self) -> bool:
        """True when the odds ratio is exactly gamma * y (closed forms apply)."""
        return self.gamma_design.name == "y" and self.gamma_design.fn is _gamma_linear

    def instrument_v1(self, x):
        return (self.v1 or self.a1_design)(x)

    def instrument_v2(self, x):
        return (self.v2 or self.a2_design)(x)

    def instrument_u(self, x, y):
        return (self.u or self.gamma_design)(x, y)

    def dims(self, d: int) -> dict[str, int]:
        return {
            "alpha1": self.a1_design.dim(d),
            "alpha2": self.a2_design.dim(d),
            "gamma": self.gamma_design.dim(d),
            "beta": self.outcome_design.dim(d),
        }

    def description(self) -> dict:
        return {
            "a1_design": self.a1_design.name,
            "a2_design": self.a2_design.name,
            "gamma_design": self.gamma_design.name,
            "outcome_design": self.outcome_design.name,
            "outcome_law": "gaussian",
            "v1": None if self.v1 is None else self.v1.name,
            "v2": None if self.v2 is None else self.v2.name,
            "u": None if self.u is None else self.u.name,
            "tilt_method": self.tilt_method,
            "quadrature_order": self.quadrature_order,
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.description(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def check_gamma_reference(self, d: int, draws: int = 100, seed: int = 0) -> bool:
        """Gamma features must vanish at y = 0 for every x."""
        rng = np.random.default_rng(seed)
        x = np.hstack([np.ones((draws, 1)), rng.uniform(-3, 3, size=(draws, d - 1))])
        feats = self.gamma_design(x, np.zeros(draws))
        return bool(np.all(feats == 0.0))


@dataclass
class ParameterState:
    alpha1: np.ndarray
    alpha2: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    sigma: float
    target: np.ndarray

    SLOTS = ("alpha1", "alpha2", "gamma", "beta", "sigma", "target")

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "gamma", "beta", "target"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)).copy())
        self.sigma = float(self.sigma)
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    def check_dims(self, spec: WorkingModelSpec, d: int) -> None:
        for name, size in spec.dims(d).items():
            got = getattr(self, name).size
            if got != size:
                raise ValueError(f"{name} has dimension {got}, spec requires {size}")

    def copy(self) -> "ParameterState":
        return ParameterState(self.alpha1, self.alpha2, self.gamma, self.beta, self.sigma, self.target)

    def to_dict(self) -> dict:
        return {
            "alpha1": self.alpha1.tolist(),
            "alpha2": self.alpha2.tolist(),
            "gamma": self.gamma.tolist(),
            "beta": self.beta.tolist(),
            "sigma": self.sigma,
            "target": self.target.tolist(),
        }
