"""Command line interface.

Commands: ``estimate``, ``curve``, ``profile``, ``sensitivity`` and
``simulate``. Results go to ``PREFIX.json`` and a plot-ready ``PREFIX.csv``
(or stdout without ``--output``). Both carry the resolved configuration
hash and package version; the run timestamp lives only in the
``PREFIX.meta.json`` sidecar so that result files are reproducible byte for
byte.

Exit codes: 0 success, 1 invalid input, 2 estimation failure. Errors are
written to stderr as ``{"code", "message", "context"}``.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import math
import sys

import numpy as np

from . import __version__
from .data import CsvSchema, load_csv, make_folds, write_csv
from .errors import EstimationError, TiltLateError, ValidationError
from .estimators import estimate_curve, estimate_if, estimate_plugin, estimate_two_tilt, \
    test_homogeneity
from .learners import LearnerSpec
from .nuisance import fit_nuisances
from .parallel import default_workers
from .profiling import STRATA, StrataQuery, marginal_strata, profile_curve, profile_stratum
from .sensitivity import sensitivity_surface
from .simulation import SimConfig, run_band_study, run_study1, run_study2, \
    simulate_dgp

FULL_SCALE_REPS = 500


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


# argument helpers

def parse_range(text, name="range"):
    """``lo:hi:count`` to an evenly spaced list."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ValidationError(f"{name} must look like lo:hi:count", value=text)
    try:
        lo, hi, count = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise ValidationError(f"could not parse {name}", value=text) from None
    if count < 1:
        raise ValidationError(f"{name} needs count >= 1", value=text)
    return [float(v) for v in np.linspace(lo, hi, count)]


def parse_list(text, cast=float):
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ValidationError("could not parse list", value=text) from None


def _param_value(text):
    if text.lower() in ("none", "null"):
        return None
    try:
        return json.loads(text.lower() if text.lower() in ("true", "false") else text)
    except json.JSONDecodeError:
        return text


def learner_from_args(args) -> LearnerSpec:
    params = {}
    for item in args.learner_param or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ValidationError("learner parameters look like key=value", value=item)
        params[key.strip()] = _param_value(value.strip())
    return LearnerSpec(args.learner, params, args.seed)


def _grid_from_args(args):
    grid = parse_range(args.deltas, "--deltas")
    if args.exclude_zero:
        grid = [d for d in grid if abs(d) >= args.exclude_zero]
    if not grid:
        raise ValidationError("the tilt grid is empty after excluding points near zero")
    return grid


def _workers(args):
    return args.workers if args.workers else default_workers()


def _schema_from_args(args) -> CsvSchema:
    if args.x:
        xs = tuple(parse_list(args.x, str))
    else:
        with open(args.input, newline="", encoding="utf-8") as fh:
            header = next(csv.reader(fh), [])
        xs = tuple(c for c in header if c not in (args.z, args.a, args.y))
    return CsvSchema(args.z, args.a, args.y, xs)


def _file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# output helpers

def _clean(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def config_hash(config: dict) -> str:
    text = json.dumps(_clean(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _csv_text(columns, rows, header_line):
    buf = io.StringIO()
    buf.write(f"# {header_line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell_text(v) for v in r])
    return buf.getvalue()


def _cell_text(v):
    # same conventions as the library's raw study tables
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    return repr(v) if isinstance(v, float) else str(v)


def emit(args, config, result, columns, rows, stdout):
    digest = config_hash(config)
    doc = {"version": __version__, "config_hash": digest, "config": config, "result": result}
    text = json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n"
    if not args.output:
        stdout.write(text)
        return
    header = f"tiltlate {__version__} config_hash={digest}"
    with open(f"{args.output}.json", "w", encoding="utf-8") as fh:
        fh.write(text)
    if columns:
        with open(f"{args.output}.csv", "w", newline="", encoding="utf-8") as fh:
            fh.write(_csv_text(columns, rows, header))
    _write_sidecar(args.output, digest)


def _write_sidecar(prefix, digest):
    meta = {"version": __version__, "config_hash": digest,
            "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")}
    with open(f"{prefix}.meta.json", "w", encoding="utf-8") as fh:
        fh.write(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _base_config(args, learner=None):
    cfg = {"command": args.command, "seed": args.seed}
    if getattr(args, "input", None):
        cfg["input_sha256"] = _file_digest(args.input)
        cfg["schema"] = {"z": args.z, "a": args.a, "y": args.y,
                         "x": list(_schema_from_args(args).x)}
    if learner is not None:
        cfg["learner"] = learner.to_dict()
    if hasattr(args, "folds"):
        cfg["folds"] = args.folds
    return cfg


EST_COLUMNS = ("method", "delta", "psi_hat", "se", "ci_lo", "ci_hi", "flags")


def _est_row(est):
    return (est.method, est.delta, est.psi_hat, est.std_error, est.ci_lo, est.ci_hi,
            ";".join(est.flags))


# commands

def cmd_estimate(args, stdout):
    data = load_csv(args.input, _schema_from_args(args))
    learner = learner_from_args(args)
    cfg = _base_config(args, learner)
    cfg.update(delta=args.delta, delta2=args.delta2, bootstrap_reps=args.bootstrap_reps)
    if args.delta2 is not None:
        est = estimate_two_tilt(data, args.delta, args.delta2, learner, args.folds, args.seed)
        emit(args, cfg, {"influence_function": est.to_dict()},
             ("method", "delta", "delta2", "psi_hat", "se", "ci_lo", "ci_hi"),
             [(est.method, est.delta, est.delta2, est.psi_hat, est.std_error, est.ci_lo,
               est.ci_hi)], stdout)
        return
    folds = make_folds(data.n, args.folds, args.seed)
    fit = fit_nuisances(data, args.delta, learner, folds, keep_models=False)
    est = estimate_if(data, fit)
    result = {"influence_function": est.to_dict(), "strata": marginal_strata(data, fit).to_dict()}
    rows = [_est_row(est)]
    try:
        plug = estimate_plugin(data, fit, args.bootstrap_reps, args.seed)
        result["plugin"] = plug.to_dict()
        rows.append(_est_row(plug))
    except EstimationError as exc:
        result["plugin"] = {"flags": [exc.code], "message": str(exc)}
    emit(args, cfg, result, EST_COLUMNS, rows, stdout)


def cmd_curve(args, stdout):
    data = load_csv(args.input, _schema_from_args(args))
    learner = learner_from_args(args)
    grid = _grid_from_args(args)
    cfg = _base_config(args, learner)
    cfg.update(deltas=grid, bootstrap_reps=args.bootstrap_reps, level=args.level)
    curve = estimate_curve(data, grid, learner, args.folds, args.seed, args.bootstrap_reps,
                           args.level, workers=_workers(args))
    result = curve.to_dict()
    try:
        h = test_homogeneity(curve)
        result["homogeneity"] = {"feasible": h.feasible, "lo": h.lo, "hi": h.hi,
                                 "points": h.points}
    except ValidationError as exc:
        result["homogeneity"] = {"feasible": False, "flags": [exc.code]}
    rows = []
    for i, d in enumerate(curve.grid):
        e = curve.estimates[i]
        if e is None:
            rows.append((d, None, None, None, None, None, None, ";".join(curve.flags[i])))
        else:
            rows.append((d, e.psi_hat, e.std_error, e.ci_lo, e.ci_hi,
                         float(curve.uniform_lo[i]), float(curve.uniform_hi[i]), ""))
    emit(args, cfg, result, ("delta", "psi_hat", "se", "ci_lo", "ci_hi", "uniform_lo",
                             "uniform_hi", "flags"), rows, stdout)
    if not curve.valid.any():
        raise EstimationError("no grid point could be estimated", flags=list(curve.flags))


def cmd_profile(args, stdout):
    data = load_csv(args.input, _schema_from_args(args))
    learner = learner_from_args(args)
    v_column = args.v_column
    if v_column not in data.column_names:
        raise ValidationError(f"unknown covariate {v_column!r}", column=v_column)
    strata = STRATA if args.stratum == "all" else (args.stratum,)
    cfg = _base_config(args, learner)
    cfg.update(delta=args.delta, v_column=v_column, strata=list(strata), weights=args.weights,
               kernel=args.kernel, bandwidth=args.bandwidth)
    folds = make_folds(data.n, args.folds, args.seed)
    fit = fit_nuisances(data, args.delta, learner, folds)
    out = []
    bandwidth = None
    if args.grid:
        grid = parse_range(args.grid, "--grid")
        cfg.update(kind="continuous", grid=grid)
        for s in strata:
            ests, bandwidth = profile_curve(data, fit, v_column, grid, s, args.bandwidth,
                                            args.kernel, args.weights)
            out.extend(ests)
    else:
        if args.v0 is None:
            raise ValidationError("profile needs --v0 or --grid")
        v0s = parse_list(args.v0)
        cfg.update(kind="discrete", v0=v0s)
        for s in strata:
            for v0 in v0s:
                q = StrataQuery(v_column, v0, args.delta)
                out.append(profile_stratum(data, fit, q, s, args.weights))
    result = {"estimates": [e.to_dict() for e in out], "bandwidth": bandwidth,
              "strata": marginal_strata(data, fit).to_dict()}
    rows = [(e.stratum, e.v0, e.delta, e.estimate, e.std_error, e.ci_lo, e.ci_hi,
             e.plain_estimate) for e in out]
    emit(args, cfg, result, ("stratum", "v0", "delta", "estimate", "se", "ci_lo", "ci_hi",
                             "plain_estimate"), rows, stdout)


def cmd_sensitivity(args, stdout):
    data = load_csv(args.input, _schema_from_args(args))
    learner = learner_from_args(args)
    folds = make_folds(data.n, args.folds, args.seed)
    fit = fit_nuisances(data, args.delta, learner, folds, keep_models=False)
    est = estimate_if(data, fit)
    g1 = parse_range(args.gamma1, "--gamma1") if args.gamma1 else None
    g2 = parse_range(args.gamma2, "--gamma2") if args.gamma2 else None
    surf = sensitivity_surface(data, fit, est, g1, g2)
    cfg = _base_config(args, learner)
    cfg.update(delta=args.delta, gamma1=surf.gamma1_values, gamma2=surf.gamma2_values)
    result = {"estimate": est.to_dict(), "surface": surf.to_dict(),
              "frontier_product": surf.frontier_product}
    rows = [(float(a), float(b), float(surf.xi_hat[i, j]))
            for i, a in enumerate(surf.gamma1_values)
            for j, b in enumerate(surf.gamma2_values)]
    emit(args, cfg, result, ("gamma1", "gamma2", "xi"), rows, stdout)


def cmd_simulate(args, stdout):
    reps = FULL_SCALE_REPS if args.full_scale else args.reps
    config = SimConfig(max(args.n, 10), seed=args.seed)
    cfg = {"command": "simulate", "study": args.study, "seed": args.seed,
           "alpha_coef": list(config.alpha_coef), "psi_true": config.psi_true,
           "z_variance": config.z_variance}
    if args.study == "data":
        sim = simulate_dgp(SimConfig(args.n, seed=args.seed))
        cfg["n"] = args.n
        if not args.output:
            raise ValidationError("simulate --study data needs --output")
        write_csv(sim.data, f"{args.output}.csv")
        _write_sidecar(args.output, config_hash(cfg))
        return
    learner = learner_from_args(args)
    grid = _grid_from_args(args)
    cfg.update(learner=learner.to_dict(), folds=args.folds, reps=reps, deltas=grid)
    workers = _workers(args)
    if args.study == "1":
        ns = parse_list(args.ns, int)
        cfg.update(ns=ns, plugin_bootstrap_reps=args.bootstrap_reps)
        res = run_study1(ns, grid, reps, learner, args.seed, args.folds, config,
                         args.bootstrap_reps, workers)
    elif args.study == "2":
        cfg.update(n=args.n)
        res = run_study2(args.n, grid, reps, learner, args.seed, args.folds, config, workers)
    else:
        cfg.update(n=args.n, bootstrap_reps=args.bootstrap_reps)
        band = run_band_study(args.n, grid, reps, learner, args.seed, args.folds, config,
                              args.bootstrap_reps, workers)
        cols = tuple(band["rows"][0]) if band["rows"] else ()
        emit(args, cfg, {"band_coverage": band["band_coverage"],
                         "feasible_rate": band["feasible_rate"]},
             cols, [tuple(r[c] for c in cols) for r in band["rows"]], stdout)
        return
    raw_cols = tuple(res.raw[0]) if res.raw else ()
    emit(args, cfg, {"aggregates": res.aggregates}, raw_cols,
         [tuple(r[c] for c in raw_cols) for r in res.raw], stdout)


# parser

def _add_common(p, data=True):
    if data:
        p.add_argument("--input", required=True, help="CSV file with a header row")
        p.add_argument("--z", default="z", help="instrument column")
        p.add_argument("--a", default="a", help="binary treatment column")
        p.add_argument("--y", default="y", help="outcome column")
        p.add_argument("--x", default=None,
                       help="comma-separated covariate columns (default: all others)")
    p.add_argument("--learner", default="forest", choices=("linear", "kernel", "forest"))
    p.add_argument("--learner-param", action="append", metavar="KEY=VALUE",
                   help="learner hyperparameter, repeatable")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", default=None, help="output prefix")
    p.add_argument("--workers", type=int, default=None,
                   help="worker processes (default: TILTLATE_WORKERS or all cores)")


def _add_grid(p):
    p.add_argument("--deltas", default="-0.85:0.85:12", help="tilt grid as lo:hi:count")
    p.add_argument("--exclude-zero", type=float, default=0.05,
                   help="drop grid points with |delta| below this")


def build_parser():
    parser = _Parser(prog="tiltlate", description="Tilted LATEs for continuous instruments.")
    parser.add_argument("--version", action="version", version=f"tiltlate {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("estimate", help="effect at one tilt, or between two tilts")
    _add_common(p)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--delta2", type=float, default=None,
                   help="second tilt; the effect among units moved between the two")
    p.add_argument("--bootstrap-reps", type=int, default=200)

    p = sub.add_parser("curve", help="estimates over a tilt grid with a uniform band")
    _add_common(p)
    _add_grid(p)
    p.add_argument("--bootstrap-reps", type=int, default=1000)
    p.add_argument("--level", type=float, default=0.95)

    p = sub.add_parser("profile", help="covariate distribution within a stratum")
    _add_common(p)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--v-column", required=True)
    p.add_argument("--v0", default=None, help="comma-separated values (discrete covariate)")
    p.add_argument("--grid", default=None, help="lo:hi:count (continuous covariate)")
    p.add_argument("--stratum", default="all", choices=STRATA + ("all",))
    p.add_argument("--weights", default="influence_function",
                   choices=("influence_function", "plain"))
    p.add_argument("--kernel", default="gaussian", choices=("gaussian", "epanechnikov"))
    p.add_argument("--bandwidth", type=float, default=None)

    p = sub.add_parser("sensitivity", help="bias-adjusted estimate without monotonicity")
    _add_common(p)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--gamma1", default=None, help="defier share grid lo:hi:count")
    p.add_argument("--gamma2", default=None, help="effect contrast grid lo:hi:count")

    p = sub.add_parser("simulate", help="simulation studies or a simulated dataset")
    _add_common(p, data=False)
    p.set_defaults(learner="kernel")
    _add_grid(p)
    p.add_argument("--study", default="1", choices=("1", "2", "band", "data"))
    p.add_argument("--ns", default="500,1000,5000", help="sample sizes for study 1")
    p.add_argument("--n", type=int, default=5000, help="sample size for other studies")
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--full-scale", action="store_true",
                   help=f"use {FULL_SCALE_REPS} replications")
    p.add_argument("--bootstrap-reps", type=int, default=200)
    return parser


COMMANDS = {"estimate": cmd_estimate, "curve": cmd_curve, "profile": cmd_profile,
            "sensitivity": cmd_sensitivity, "simulate": cmd_simulate}


def _report(exc: TiltLateError, stderr):
    stderr.write(json.dumps(_clean({"code": exc.code, "message": str(exc),
                                    "context": exc.context}), sort_keys=True) + "\n")


RANGE_FLAGS = ("--deltas", "--grid", "--gamma1", "--gamma2", "--v0")


def _join_range_values(argv):
    # ranges such as "-0.85:0.85:12" would otherwise be read as options
    out = []
    it = iter(argv)
    for tok in it:
        if tok in RANGE_FLAGS:
            nxt = next(it, None)
            out.append(tok if nxt is None else f"{tok}={nxt}")
        else:
            out.append(tok)
    return out


def main(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    argv = _join_range_values(sys.argv[1:] if argv is None else list(argv))
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args, stdout)
    except ValidationError as exc:
        _report(exc, stderr)
        return 1
    except EstimationError as exc:
        _report(exc, stderr)
        return 2
    except OSError as exc:
        _report(ValidationError(str(exc), path=getattr(exc, "filename", None)), stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
