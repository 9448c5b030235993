"""Command-line front end: ``estimate``, ``simulate`` and ``identify``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 solver
failure. Reports are JSON and always embed the resolved configuration and
the tool version; metrics are CSV.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .data import COVARIATE_MAPS, ODDS_RATIO_MAPS, WorkingModelSpec
from .engine import SolverError, check_common_slope
from .estimators import MEAN_METHODS, NonConvergenceError, estimate_mean
from .identification import (
    DiscreteJoint,
    InfeasibleTablesError,
    ObservedTables,
    RestrictionError,
    binary_toy,
    identify,
    infeasibility_report,
    observed_tables,
    restriction_cells,
)
from .io import RESERVED, DataFormatError, format_float, load_csv, read_header
from .simulation import SCENARIOS, ScenarioSpec, ScenarioUnusableError, get_scenario, run_replications

log = logging.getLogger("callback_mnar")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_SOLVER = 0, 2, 3, 4
METRIC_COLUMNS = ("scenario", "method", "parameter", "bias", "mc_sd", "mean_se", "coverage", "n_fail")
ESTIMATE_COLUMNS = ("replication", "method", "mu", "se_mu", "gamma", "se_gamma", "iterations", "failed")
SIM_METHODS = ("ipw", "reg", "dr", "calibration")


class ConfigError(ValueError):
    pass


def _methods(text: str, allowed: Sequence[str]) -> list[str]:
    out = [m.strip() for m in text.split(",") if m.strip()]
    if not out:
        raise ConfigError("no methods given")
    bad = [m for m in out if m not in allowed]
    if bad:
        raise ConfigError(f"unknown method(s) {', '.join(bad)}; choose from {', '.join(allowed)}")
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


def _envelope(command: str, config: dict) -> dict:
    return {"tool": "callback-mnar", "version": __version__, "command": command, "config": config}


# ---------------------------------------------------------------------------
# estimate


def _spec_from_args(args) -> WorkingModelSpec:
    try:
        return WorkingModelSpec.from_names(args.a1, args.a2, args.odds_ratio, args.outcome,
                                           tilt_method=args.tilt, quadrature_order=args.quadrature)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _report_block(report) -> dict:
    block = report.to_dict()
    block["covariance"] = None if report.covariance is None else report.covariance.tolist()
    return block


def cmd_estimate(args) -> int:
    config = {
        "data": str(args.data), "covariates": args.covariates, "a1": args.a1, "a2": args.a2,
        "odds_ratio": args.odds_ratio, "outcome": args.outcome, "tilt": args.tilt,
        "quadrature": args.quadrature, "methods": args.methods, "tol": args.tol,
        "max_iter": args.max_iter, "bootstrap": args.bootstrap, "seed": args.seed,
    }
    out = Path(args.out)
    payload = _envelope("estimate", config)
    try:
        methods = _methods(args.methods, MEAN_METHODS)
        spec = _spec_from_args(args)
        if "calibration" in methods:
            try:
                check_common_slope(spec)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        if args.bootstrap and args.bootstrap < 100:
            raise ConfigError("--bootstrap needs at least 100 resamples")
        if args.tol <= 0 or args.max_iter < 1:
            raise ConfigError("--tol must be positive and --max-iter at least 1")
        covariates = None if not args.covariates else [c.strip() for c in args.covariates.split(",")]
        try:
            header = read_header(args.data)
        except (OSError, DataFormatError) as exc:
            raise ConfigError(f"cannot read header of {args.data}: {exc}") from None
        if covariates is not None:
            unknown = [c for c in covariates if c not in header or c in RESERVED]
            if unknown:
                raise ConfigError(f"unknown covariate name(s) not in header: {', '.join(unknown)}")
    except ConfigError as exc:
        return _fail(out, payload, EXIT_CONFIG, "config error", exc)
    try:
        data = load_csv(args.data, covariates)
    except DataFormatError as exc:
        return _fail(out, payload, EXIT_DATA, "data error", exc)
    payload["data"] = {"n": data.n, "covariates": list(data.covariate_names), "strata": data.strata_counts()}
    payload["spec"] = spec.description()
    payload["spec_fingerprint"] = spec.fingerprint()
    results, failed = {}, []
    for m in methods:
        try:
            rep = estimate_mean(m, data, spec, tol=args.tol, max_iter=args.max_iter,
                                bootstrap_B=args.bootstrap, seed=args.seed)
            results[m] = _report_block(rep)
        except NonConvergenceError as exc:
            results[m] = _report_block(exc.report) | {"error": str(exc)}
            failed.append(m)
        except (SolverError, ArithmeticError, np.linalg.LinAlgError) as exc:
            results[m] = {"method": m, "converged": False, "error": f"{type(exc).__name__}: {exc}"}
            failed.append(m)
    payload["results"] = results
    payload["status"] = "ok" if not failed else "solver failure: " + ", ".join(failed)
    _write_json(out, payload)
    for m, block in results.items():
        if block.get("converged") and block.get("estimate"):
            est, se = block["estimate"][0], block["se"][0]
            print(f"{m:12s} mu = {est:.6f}  se = {se:.6f}")
        else:
            print(f"{m:12s} failed: {block.get('error', 'non-convergence')}")
    return EXIT_SOLVER if failed else EXIT_OK


def _fail(out: Path, payload: dict, code: int, kind: str, exc: Exception) -> int:
    payload["status"] = f"{kind}: {exc}"
    try:
        _write_json(out, payload)
    except OSError:
        pass
    print(f"{kind}: {exc}", file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# simulate


def _scenario_from_args(args) -> ScenarioSpec:
    if args.scenario_file:
        try:
            cfg = json.loads(Path(args.scenario_file).read_text())
            scen = ScenarioSpec.from_dict(cfg)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"bad scenario file: {exc}") from None
    else:
        try:
            scen = get_scenario(args.scenario)
        except (KeyError, ValueError):
            raise ConfigError(f"unknown scenario {args.scenario!r}; choose from {', '.join(SCENARIOS)}") from None
    if args.delta:
        scen = scen.with_delta(args.delta)
    return scen


def _write_metrics(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([format_float(r[c]) if isinstance(r[c], float) else r[c] for c in METRIC_COLUMNS])


def _write_estimates(path: Path, scenario: str, estimates: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("scenario",) + ESTIMATE_COLUMNS)
        for e in estimates:
            failed = bool(e.get("failed"))
            row = [scenario, e["replication"], e["method"]]
            for c in ESTIMATE_COLUMNS[2:-1]:
                row.append("NA" if failed else (format_float(e[c]) if isinstance(e[c], float) else e[c]))
            row.append(int(failed))
            w.writerow(row)


def sidecar_paths(out: Path) -> tuple[Path, Path]:
    """Per-replication estimates CSV and JSON report written next to the metrics CSV."""
    stem = out.with_suffix("")
    return Path(f"{stem}.estimates.csv"), Path(f"{stem}.report.json")


def cmd_simulate(args) -> int:
    config = {"scenario": args.scenario, "scenario_file": args.scenario_file, "delta": args.delta,
              "reps": args.reps, "n": args.n, "seed": args.seed, "methods": args.methods, "tol": args.tol}
    out = Path(args.out)
    est_path, report_path = sidecar_paths(out)
    payload = _envelope("simulate", config)
    try:
        methods = _methods(args.methods, SIM_METHODS)
        if args.reps < 2 or args.n < 10:
            raise ConfigError("--reps must be at least 2 and --n at least 10")
        if args.tol <= 0:
            raise ConfigError("--tol must be positive")
        scen = _scenario_from_args(args)
    except ConfigError as exc:
        return _fail(report_path, payload, EXIT_CONFIG, "config error", exc)
    payload["scenario_parameters"] = scen.to_dict()
    code = EXIT_OK
    try:
        metrics = run_replications(scen, methods, args.reps, args.n, args.seed, tol=args.tol)
        payload["status"] = "ok"
    except ScenarioUnusableError as exc:
        metrics = exc.metrics
        payload["status"] = f"solver failure: {exc}"
        code = EXIT_SOLVER
    _write_metrics(out, metrics.rows)
    _write_estimates(est_path, metrics.scenario, metrics.estimates)
    payload["metrics"] = metrics.to_dict()
    payload["outputs"] = {"metrics_csv": str(out), "estimates_csv": str(est_path)}
    _write_json(report_path, payload)
    for r in metrics.rows:
        print(f"{r['method']:12s} {r['parameter']:6s} bias={r['bias']:+.4f} sd={r['mc_sd']:.4f} "
              f"se={r['mean_se']:.4f} cover={r['coverage']:.3f} fail={r['n_fail']}")
    if code:
        print(payload["status"], file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# identify


def _observed_from_config(cfg: dict) -> tuple[ObservedTables, Optional[DiscreteJoint]]:
    if "toy" in cfg:
        kind = cfg["toy"]
        if kind == "binary":
            joint = binary_toy()
        elif kind == "mar":
            joint = binary_toy(pi1_coef=(-0.5, 0.0), pi2_coef=(0.3, 0.0))
        else:
            raise ConfigError(f"unknown toy {kind!r}; choose binary or mar")
        return observed_tables(joint), joint
    if "joint" in cfg:
        joint = DiscreteJoint.from_dict(cfg["joint"])
        return observed_tables(joint), joint
    if "tables" in cfg:
        return ObservedTables.from_dict(cfg["tables"]), None
    raise ConfigError("identify config needs one of 'toy', 'joint' or 'tables'")


def cmd_identify(args) -> int:
    out = Path(args.out)
    payload = _envelope("identify", {"config": str(args.config), "bracket_tol": args.bracket_tol})
    try:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read {args.config}: {exc}") from None
        payload["config"]["contents"] = cfg
        try:
            obs, joint = _observed_from_config(cfg)
        except (ValueError, KeyError, TypeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid tables: {exc}") from None
    except ConfigError as exc:
        return _fail(out, payload, EXIT_CONFIG, "config error", exc)
    payload["observed"] = obs.to_dict()
    try:
        report = identify(obs, args.bracket_tol)
    except (InfeasibleTablesError, RestrictionError) as exc:
        payload["status"] = f"infeasible: {exc}"
        payload["margins"] = infeasibility_report(obs)
        _write_json(out, payload)
        print(payload["status"], file=sys.stderr)
        return EXIT_SOLVER
    payload.update(report)
    if joint is not None:
        payload["generating"] = {"pi1": joint.pi1.tolist(), "pi2": joint.pi2.tolist(),
                                 "f_y_given_x": joint.f_y_given_x.tolist()}
    if not report["restriction"]["satisfied"]:
        payload["status"] = "infeasible: restriction violated"
        payload["offending_cells"] = [c for c in restriction_cells(obs, np.array(report["D"])) if c["margin"] <= 0]
        _write_json(out, payload)
        print(payload["status"], file=sys.stderr)
        return EXIT_SOLVER
    payload["status"] = "ok"
    _write_json(out, payload)
    for i, d in enumerate(report["D"]):
        print(f"x[{i}]  D = {d:.12f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="callback-mnar", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("estimate", help="estimate the outcome mean from a callback CSV")
    e.add_argument("--data", required=True, help="CSV with covariates, y, r1, r2")
    e.add_argument("--covariates", default="", help="comma-separated covariate columns (default: all)")
    e.add_argument("--a1", default="linear", choices=sorted(COVARIATE_MAPS))
    e.add_argument("--a2", default="linear", choices=sorted(COVARIATE_MAPS))
    e.add_argument("--odds-ratio", default="y", choices=sorted(ODDS_RATIO_MAPS))
    e.add_argument("--outcome", default="linear", choices=sorted(COVARIATE_MAPS))
    e.add_argument("--tilt", default="auto", choices=("auto", "quadrature"))
    e.add_argument("--quadrature", type=int, default=64, choices=(16, 32, 64, 96))
    e.add_argument("--methods", default="ipw,reg,dr,cc")
    e.add_argument("--tol", type=float, default=1e-10)
    e.add_argument("--max-iter", type=int, default=200)
    e.add_argument("--bootstrap", type=int, default=0, metavar="B")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default="report.json")
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("simulate", help="Monte Carlo replications for a named or custom scenario")
    s.add_argument("--scenario", default="TT")
    s.add_argument("--scenario-file", default=None, help="JSON scenario parameters (overrides --scenario)")
    s.add_argument("--delta", type=float, default=0.0, help="second-call odds-ratio offset")
    s.add_argument("--reps", type=int, default=500)
    s.add_argument("--n", type=int, default=3000)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--methods", default="ipw,reg,dr")
    s.add_argument("--tol", type=float, default=1e-10)
    s.add_argument("--out", default="metrics.csv")
    s.set_defaults(func=cmd_simulate)

    i = sub.add_parser("identify", help="recover the full joint from discrete observed tables")
    i.add_argument("--config", required=True, help="JSON with 'toy', 'joint' or 'tables'")
    i.add_argument("--bracket-tol", type=float, default=1e-12)
    i.add_argument("--out", default="identify.json")
    i.set_defaults(func=cmd_identify)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
