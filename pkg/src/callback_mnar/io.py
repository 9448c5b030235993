"""CSV ingestion and emission for callback records.

Schema: covariate columns (any names), then ``y``, ``r1``, ``r2``. The
literal ``NA`` is the only missing token and must appear exactly when
``r2 == 0``.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import Dataset, validate_dataset

NA = "NA"
RESERVED = ("y", "r1", "r2")


class DataFormatError(ValueError):
    """Malformed header, unparseable cell or a record breaking an invariant."""


def _parse_flag(cell: str, name: str, line: int) -> int:
    if cell not in ("0", "1"):
        raise DataFormatError(f"line {line}: {name} must be 0 or 1, got {cell!r}")
    return int(cell)


def _parse_float(cell: str, name: str, line: int) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise DataFormatError(f"line {line}: cannot parse {name}={cell!r} as a number") from None
    if not np.isfinite(v):
        raise DataFormatError(f"line {line}: {name} is not finite")
    return v


def read_header(path: str | Path) -> list[str]:
    with Path(path).open(newline="") as fh:
        try:
            return [h.strip() for h in next(csv.reader(fh))]
        except StopIteration:
            raise DataFormatError("empty file: header missing") from None


def load_csv(path: str | Path, covariates: Optional[Sequence[str]] = None, add_intercept: bool = True) -> Dataset:
    """Read a callback CSV into a :class:`Dataset`.

    ``covariates`` selects columns by name (default: every non-reserved
    column, in file order). A ``const`` column of ones is prepended unless
    the file already has one or ``add_intercept`` is false.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("empty file: header missing") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise DataFormatError("duplicate column names in header")
        missing = [c for c in RESERVED if c not in header]
        if missing:
            raise DataFormatError(f"header lacks required column(s): {', '.join(missing)}")
        available = [h for h in header if h not in RESERVED]
        if covariates is None:
            covariates = available
        unknown = [c for c in covariates if c not in available]
        if unknown:
            raise DataFormatError(f"unknown covariate name(s): {', '.join(unknown)}")
        pos = {h: i for i, h in enumerate(header)}
        xs, ys, r1s, r2s = [], [], [], []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"line {line}: expected {len(header)} fields, got {len(row)}")
            r1 = _parse_flag(row[pos["r1"]], "r1", line)
            r2 = _parse_flag(row[pos["r2"]], "r2", line)
            if r1 == 1 and r2 == 0:
                raise DataFormatError(f"line {line}: callback monotonicity violated (r1=1, r2=0)")
            cell = row[pos["y"]]
            if cell == NA:
                if r2 == 1:
                    raise DataFormatError(f"line {line}: outcome missing for respondent (r2=1, y=NA)")
                y = np.nan
            else:
                if r2 == 0:
                    raise DataFormatError(f"line {line}: outcome present for nonrespondent (r2=0)")
                y = _parse_float(cell, "y", line)
            xs.append([_parse_float(row[pos[c]], c, line) for c in covariates])
            ys.append(y)
            r1s.append(r1)
            r2s.append(r2)
    if not xs:
        raise DataFormatError("no data rows")
    x = np.array(xs, dtype=float).reshape(len(xs), len(covariates))
    names = list(covariates)
    if add_intercept and "const" not in names:
        x = np.column_stack([np.ones(len(xs)), x])
        names = ["const"] + names
    ds = Dataset(x, np.array(ys), r1s, r2s, names)
    problems = [v for v in validate_dataset(ds) if v.index >= 0]
    if problems:
        raise DataFormatError(f"line {problems[0].index + 2}: {problems[0].rule}")
    return ds


def format_float(v: float) -> str:
    # shortest repr that round-trips exactly
    return repr(float(v))


def write_csv(data: Dataset, path: str | Path, drop_intercept: bool = True) -> None:
    """Write records in the ingestion schema; ``load_csv`` reads them back unchanged."""
    names = list(data.covariate_names)
    cols = list(range(len(names)))
    if drop_intercept and names and names[0] == "const" and np.all(data.x[:, 0] == 1.0):
        cols = cols[1:]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([names[j] for j in cols] + list(RESERVED))
        for i in range(data.n):
            y = format_float(data.y[i]) if data.r2[i] == 1 else NA
            w.writerow([format_float(data.x[i, j]) for j in cols] + [y, int(data.r1[i]), int(data.r2[i])])


def collapse_calls(response_call, early_calls: int) -> tuple[np.ndarray, np.ndarray]:
    """Two-stage indicators from the call number at which each unit answered.

    ``response_call`` holds 1, 2, ... for the answering call and 0 for units
    never reached. Calls up to ``early_calls`` form the first stage; every
    later call counts as the second. The cut is study-specific, so there is
    no default.
    """
    calls = np.asarray(response_call)
    if calls.ndim != 1 or not np.issubdtype(calls.dtype, np.integer) or np.any(calls < 0):
        raise ValueError("response_call must be a 1-d array of non-negative integers")
    if int(early_calls) < 1:
        raise ValueError("early_calls must be at least 1")
    r1 = ((calls >= 1) & (calls <= early_calls)).astype(int)
    r2 = (calls >= 1).astype(int)
    return r1, r2
