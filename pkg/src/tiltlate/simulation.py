"""Simulation design with a known constant effect, plus the replication harness.

Data model::

    (Y0, X) ~ N(0, I_5)             X is 4-dimensional, Y0 independent of X
    Z | X, Y0 ~ N(coef' X, z_variance)
    A = 1(Z >= Y0)
    Y = Y0 + psi_true * A
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .data import Dataset, make_folds
from .errors import EstimationError, ValidationError
from .estimators import estimate_curve, estimate_if, estimate_plugin, test_homogeneity
from .learners import LearnerSpec
from .nuisance import NuisanceFit, fit_nuisances
from .parallel import run_tasks
from .tilt import EPSILON_ZERO, GaussianInstrumentModel, check_delta

DEFAULT_COEF = (1.0, 1.0, -1.0, -1.0)


@dataclass(frozen=True)
class SimConfig:
    n: int
    alpha_coef: tuple = DEFAULT_COEF
    psi_true: float = 2.0
    z_variance: float = 2.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "alpha_coef", tuple(float(c) for c in self.alpha_coef))
        if self.n < 10:
            raise ValidationError("simulation needs n >= 10")
        if not self.z_variance > 0:
            raise ValidationError("z_variance must be positive")

    @property
    def instrument_model(self) -> GaussianInstrumentModel:
        return GaussianInstrumentModel.linear(self.alpha_coef, self.z_variance)


@dataclass(frozen=True, eq=False)
class SimulatedData:
    """Public dataset plus the hidden untreated outcome, kept apart on purpose."""

    data: Dataset
    y0: np.ndarray
    config: SimConfig


def _rng(*key):
    return np.random.default_rng(np.random.SeedSequence([int(k) & (2**64 - 1) for k in key]))


def simulate_dgp(config: SimConfig, stream=()) -> SimulatedData:
    rng = _rng(config.seed, 0xD6, *stream)
    d = len(config.alpha_coef)
    joint = rng.standard_normal((config.n, d + 1))
    y0, x = joint[:, 0], joint[:, 1:]
    z = x @ np.asarray(config.alpha_coef) + math.sqrt(config.z_variance) * rng.standard_normal(config.n)
    a = (z >= y0).astype(float)
    y = y0 + config.psi_true * a
    names = tuple(f"x{j + 1}" for j in range(d))
    return SimulatedData(Dataset(x, z, a, y, names), y0, config)


def true_tilted_late(config: SimConfig, delta: float) -> float:
    """With a homogeneous effect every tilted local effect equals ``psi_true``."""
    check_delta(delta)
    return float(config.psi_true)


def oracle_nuisances(data: Dataset, config: SimConfig, delta: float) -> NuisanceFit:
    """Closed-form nuisances of the simulation design.

    ``alpha`` is the Gaussian moment generating function; under the tilt
    ``Z ~ N(m + delta s2, s2)`` independently of ``Y0``, so the tilted
    treatment probability is ``Phi((m + delta s2) / sqrt(s2 + 1))`` and the
    tilted outcome mean is ``psi_true`` times that.
    """
    m = data.x @ np.asarray(config.alpha_coef)
    s2 = config.z_variance
    alpha = np.exp(delta * m + 0.5 * delta**2 * s2)
    gamma_a = stats.norm.cdf((m + delta * s2) / math.sqrt(s2 + 1.0))
    gamma_y = config.psi_true * gamma_a
    return NuisanceFit.from_arrays(delta, alpha, gamma_y, gamma_a, clip=False)


def oracle_complier_mass(config: SimConfig, delta: float, draws=10**6, seed=0, v_fn=None):
    """Monte Carlo ``P(A^{Z_delta} != A)`` (and optionally its ``P(V = 1, .)`` part).

    Under the tilt the transformed instrument is ``Z + delta z_variance``.
    Returns the complier mass, or ``(mass, P(V=1 | complier))`` when a
    binary covariate function ``v_fn(x)`` is supplied.
    """
    sim = simulate_dgp(SimConfig(draws, config.alpha_coef, config.psi_true,
                                 config.z_variance, seed))
    z = sim.data.z
    zd = z + delta * config.z_variance
    a = sim.data.a
    ad = (zd >= sim.y0).astype(float)
    comp = (ad > a) if delta > 0 else (ad < a)
    mass = float(comp.mean())
    if v_fn is None:
        return mass
    v = np.asarray(v_fn(sim.data.x), dtype=bool)
    return mass, float(v[comp].mean())


def complier_mass_closed_form(config: SimConfig, delta: float) -> float:
    """``P(0 < Y0 - Z <= delta z_variance)`` with ``Y0 - Z`` Gaussian."""
    coef = np.asarray(config.alpha_coef)
    sd = math.sqrt(1.0 + coef @ coef + config.z_variance)
    return float(abs(stats.norm.cdf(delta * config.z_variance / sd) - 0.5))


# --------------------------------------------------------------------------
# study harness

RAW_COLUMNS = ("estimator", "n", "delta_index", "delta", "rep", "psi_hat", "se", "ci_lo",
               "ci_hi", "covered", "flag")


def _cell(args):
    (n, di, delta, rep, learner, seed, k, cfg, plugin_reps, estimators) = args
    config = SimConfig(n, cfg["alpha_coef"], cfg["psi_true"], cfg["z_variance"], seed)
    sim = simulate_dgp(config, stream=(n, di, rep))
    folds = make_folds(n, k, int(_rng(seed, 0xF0, n, di, rep).integers(2**63)))
    truth = config.psi_true
    rows = []
    try:
        fit = fit_nuisances(sim.data, delta, learner, folds, keep_models=False)
    except EstimationError as exc:
        return [_row(m, n, di, delta, rep, None, truth, exc.code) for m in estimators]
    for method in estimators:
        try:
            if method == "plugin":
                est = estimate_plugin(sim.data, fit, plugin_reps,
                                      seed=int(_rng(seed, 0xB0, n, di, rep).integers(2**63)))
            else:
                est = estimate_if(sim.data, fit)
        except EstimationError as exc:
            rows.append(_row(method, n, di, delta, rep, None, truth, exc.code))
            continue
        rows.append(_row(method, n, di, delta, rep, est, truth, ""))
    return rows


def _row(method, n, di, delta, rep, est, truth, flag):
    if est is None:
        return {"estimator": method, "n": n, "delta_index": di, "delta": delta, "rep": rep,
                "psi_hat": float("nan"), "se": float("nan"), "ci_lo": float("nan"),
                "ci_hi": float("nan"), "covered": False, "flag": flag}
    return {"estimator": method, "n": n, "delta_index": di, "delta": delta, "rep": rep,
            "psi_hat": est.psi_hat, "se": est.std_error, "ci_lo": est.ci_lo,
            "ci_hi": est.ci_hi, "covered": bool(est.covers(truth)), "flag": flag}


@dataclass(frozen=True, eq=False)
class StudyResult:
    raw: list
    aggregates: dict
    meta: dict = field(default_factory=dict)

    def raw_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RAW_COLUMNS)
        for r in self.raw:
            w.writerow([_fmt(r[c]) for c in RAW_COLUMNS])
        return buf.getvalue()

    def aggregates_json(self) -> str:
        return json.dumps({"meta": self.meta, "aggregates": self.aggregates}, indent=2,
                          sort_keys=True, allow_nan=True) + "\n"

    def write(self, prefix):
        with open(f"{prefix}_raw.csv", "w", newline="", encoding="utf-8") as fh:
            fh.write(self.raw_csv())
        with open(f"{prefix}_aggregates.json", "w", encoding="utf-8") as fh:
            fh.write(self.aggregates_json())


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def integrated_metrics(psi_by_delta: Sequence[Sequence[float]], truths: Sequence[float], n: int):
    """Integrated bias and sqrt(n)-scaled integrated RMSE over a tilt grid.

    ``bias = mean_i |mean_j psi_ij - psi_i|`` and
    ``rmse = sqrt(n) * mean_i sqrt(mean_j (psi_ij - psi_i)^2)``.
    """
    biases, rmses = [], []
    for vals, truth in zip(psi_by_delta, truths):
        vals = np.asarray(vals, dtype=float)
        if vals.size == 0:
            continue
        biases.append(abs(float(np.mean(vals)) - truth))
        rmses.append(math.sqrt(float(np.mean((vals - truth) ** 2))))
    if not biases:
        return float("nan"), float("nan")
    return float(np.mean(biases)), math.sqrt(n) * float(np.mean(rmses))


def aggregate(raw, truth):
    """Study aggregates per (estimator, n); recomputable from ``raw`` alone."""
    out = {}
    keys = sorted({(r["estimator"], r["n"]) for r in raw})
    for method, n in keys:
        rows = [r for r in raw if r["estimator"] == method and r["n"] == n]
        dis = sorted({r["delta_index"] for r in rows})
        per_delta, deltas, coverage, excluded, counts = [], [], [], 0, []
        for di in dis:
            cell = [r for r in rows if r["delta_index"] == di]
            good = [r for r in cell if not r["flag"]]
            excluded += len(cell) - len(good)
            per_delta.append([r["psi_hat"] for r in good])
            deltas.append(cell[0]["delta"])
            coverage.append(float(np.mean([r["covered"] for r in good])) if good
                            else float("nan"))
            counts.append(len(good))
        bias, rmse = integrated_metrics(per_delta, [truth] * len(per_delta), n)
        out[f"{method}/n={n}"] = {
            "estimator": method, "n": n, "deltas": deltas, "integrated_bias": bias,
            "integrated_rmse": rmse, "coverage_by_delta": coverage, "successes": counts,
            "excluded": excluded}
    return out


def _study(ns, deltas, reps, learner, seed, k, config, plugin_reps, workers, estimators):
    deltas = [float(d) for d in deltas]
    for d in deltas:
        check_delta(d, EPSILON_ZERO)
    cfg = {"alpha_coef": tuple(config.alpha_coef), "psi_true": config.psi_true,
           "z_variance": config.z_variance}
    tasks = [(int(n), di, d, rep, learner, int(seed), int(k), cfg, int(plugin_reps),
              tuple(estimators))
             for n in ns for di, d in enumerate(deltas) for rep in range(reps)]
    raw = [row for rows in run_tasks(_cell, tasks, workers) for row in rows]
    meta = {"ns": [int(n) for n in ns], "deltas": deltas, "reps": int(reps),
            "learner": learner.to_dict(), "seed": int(seed), "folds": int(k),
            "plugin_bootstrap_reps": int(plugin_reps), **cfg,
            "alpha_coef": list(cfg["alpha_coef"])}
    return StudyResult(raw, aggregate(raw, config.psi_true), meta)


def default_grid(count=12, lo=-0.85, hi=0.85, exclude=0.05):
    grid = np.linspace(lo, hi, count)
    return [float(d) for d in grid if abs(d) >= exclude]


def run_study1(ns, deltas, reps, learner: LearnerSpec, seed=0, k=5, config=None,
               plugin_reps=200, workers=1) -> StudyResult:
    """Plug-in versus influence-function estimator on independent cells.

    Each (n, delta, replication) cell draws its own dataset from a stream
    keyed by ``(seed, n, delta index, replication)``.
    """
    config = config or SimConfig(10)
    return _study(ns, deltas, reps, learner, seed, k, config, plugin_reps, workers,
                  ("plugin", "influence_function"))


def run_study2(n, deltas, reps, learner: LearnerSpec, seed=0, k=5, config=None,
               workers=1) -> StudyResult:
    """Empirical coverage of pointwise 95% intervals of the IF estimator per tilt."""
    config = config or SimConfig(10)
    return _study([n], deltas, reps, learner, seed, k, config, 0, workers,
                  ("influence_function",))


def _band_rep(args):
    n, rep, deltas, learner, seed, k, cfg, boot = args
    config = SimConfig(n, cfg["alpha_coef"], cfg["psi_true"], cfg["z_variance"], seed)
    sim = simulate_dgp(config, stream=(n, 0xBA, rep))
    curve = estimate_curve(sim.data, deltas, learner, k,
                           int(_rng(seed, 0xC0, n, rep).integers(2**63)), boot)
    ok = curve.valid
    contains = bool(ok.any() and np.all(curve.uniform_lo[ok] <= config.psi_true)
                    and np.all(curve.uniform_hi[ok] >= config.psi_true))
    try:
        feasible = test_homogeneity(curve).feasible
    except ValidationError:
        feasible = False
    return {"rep": rep, "contains_truth": contains, "homogeneity_feasible": feasible,
            "valid_points": int(ok.sum()), "multiplier_quantile": curve.multiplier_quantile,
            "pointwise_covered": int(sum(e.covers(config.psi_true)
                                         for e in curve.estimates if e is not None))}


def run_band_study(n, deltas, reps, learner: LearnerSpec, seed=0, k=5, config=None,
                   bootstrap_reps=1000, workers=1):
    """Per replication: one dataset, a full curve, uniform-band coverage and homogeneity."""
    config = config or SimConfig(10)
    cfg = {"alpha_coef": tuple(config.alpha_coef), "psi_true": config.psi_true,
           "z_variance": config.z_variance}
    tasks = [(int(n), rep, [float(d) for d in deltas], learner, int(seed), int(k), cfg,
              int(bootstrap_reps)) for rep in range(reps)]
    rows = run_tasks(_band_rep, tasks, workers)
    return {"rows": rows,
            "band_coverage": float(np.mean([r["contains_truth"] for r in rows])),
            "feasible_rate": float(np.mean([r["homogeneity_feasible"] for r in rows]))}
