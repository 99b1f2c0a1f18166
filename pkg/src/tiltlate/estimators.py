"""Plug-in and influence-function estimators of the tilted LATE.

The uncentered influence-function pieces for a variable ``T`` are

    xi(T; d)     = T w + gamma^T_d(X) (1 - w),    w = e^{d Z} / alpha_d(X)
    Theta(T; d,0) = xi(T; d) - T

and the estimate is ``mean(Theta(Y)) / mean(Theta(A))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .data import Dataset, make_folds
from .errors import BadOrder, EstimationError, ValidationError, WeakInstrument
from .learners import LearnerSpec
from .nuisance import ALPHA_FLOOR, NuisanceFit, fit_nuisances
from .parallel import run_tasks
from .tilt import EPSILON_ZERO, check_delta

WEAK_THRESHOLD = 1e-4
Z975 = float(stats.norm.ppf(0.975))


@dataclass(frozen=True, eq=False)
class IFValues:
    xi_y_delta: np.ndarray
    xi_y_zero: np.ndarray
    xi_a_delta: np.ndarray
    xi_a_zero: np.ndarray
    theta_y: np.ndarray
    theta_a: np.ndarray
    phi: np.ndarray
    psi: float
    denominator: float


@dataclass(frozen=True)
class LateEstimate:
    delta: float
    psi_hat: float
    std_error: float
    ci_lo: float
    ci_hi: float
    numerator_hat: float
    denominator_hat: float
    n: int
    method: str
    denominator_se: float = float("nan")
    flags: tuple = ()
    delta2: float | None = None
    sigma_by_fold: tuple = ()

    def covers(self, value) -> bool:
        return self.ci_lo <= value <= self.ci_hi

    def to_dict(self) -> dict:
        d = {"delta": self.delta, "psi_hat": self.psi_hat, "se": self.std_error,
             "ci": [self.ci_lo, self.ci_hi], "n": self.n, "method": self.method,
             "numerator": self.numerator_hat, "denominator": self.denominator_hat,
             "flags": list(self.flags)}
        if self.delta2 is not None:
            d["delta2"] = self.delta2
        if self.sigma_by_fold:
            d["sigma_by_fold"] = list(self.sigma_by_fold)
        return d


def _tilt_weight(data: Dataset, fit: NuisanceFit):
    return np.exp(fit.delta * data.z) / np.maximum(fit.alpha, ALPHA_FLOOR)


def xi_values(t, weight, gamma_t):
    """``xi(T; delta)`` row-wise."""
    return t * weight + gamma_t * (1.0 - weight)


def _check_fit(data, fit):
    if fit.n != data.n:
        raise ValidationError("nuisance fit and data have different sizes",
                              fit_n=fit.n, data_n=data.n)


def compute_if_values(data: Dataset, fit: NuisanceFit, psi: float) -> IFValues:
    """Influence-function components with ``phi`` normalised by the plug-in denominator."""
    _check_fit(data, fit)
    w = _tilt_weight(data, fit)
    xi_y = xi_values(data.y, w, fit.gamma_y)
    xi_a = xi_values(data.a, w, fit.gamma_a)
    theta_y = xi_y - data.y
    theta_a = xi_a - data.a
    denom = float(np.mean(fit.gamma_a - data.a))
    if abs(denom) < WEAK_THRESHOLD:
        raise WeakInstrument(f"plug-in denominator {denom:.3g} is too close to zero",
                             delta=fit.delta, denominator=denom)
    phi = (theta_y - psi * theta_a) / denom
    return IFValues(xi_y, data.y, xi_a, data.a, theta_y, theta_a, phi, float(psi), denom)


def _pointwise(psi, se):
    return psi - Z975 * se, psi + Z975 * se


def estimate_if(data: Dataset, fit: NuisanceFit) -> LateEstimate:
    _check_fit(data, fit)
    w = _tilt_weight(data, fit)
    theta_y = xi_values(data.y, w, fit.gamma_y) - data.y
    theta_a = xi_values(data.a, w, fit.gamma_a) - data.a
    num = float(np.mean(theta_y))
    den = float(np.mean(theta_a))
    if abs(den) < WEAK_THRESHOLD:
        raise WeakInstrument(f"estimated complier mass {den:.3g} is too close to zero",
                             delta=fit.delta, denominator=den)
    psi = num / den
    iv = compute_if_values(data, fit, psi)
    n = data.n
    se = math.sqrt(float(np.mean(iv.phi ** 2)) / n)
    lo, hi = _pointwise(psi, se)
    den_se = float(np.std(theta_a) / math.sqrt(n))
    return LateEstimate(fit.delta, psi, se, lo, hi, num, den, n, "influence_function",
                        den_se, sigma_by_fold=_sigma_by_fold(iv.phi, fit.folds))


def _sigma_by_fold(phi, folds):
    # stability diagnostic for the variance estimate; not used for inference
    if folds is None or folds.n != phi.shape[0]:
        return ()
    return tuple(float(np.sqrt(np.mean(phi[folds.indices(f)] ** 2))) for f in range(folds.k))


def estimate_plugin(data: Dataset, fit: NuisanceFit, bootstrap_reps=200, seed=0,
                    level=0.95) -> LateEstimate:
    """Ratio of mean tilted-minus-observed outcome to the same for treatment.

    The standard error comes from a nonparametric bootstrap of the two means
    holding the nuisance predictions fixed.
    """
    _check_fit(data, fit)
    dy = fit.gamma_y - data.y
    da = fit.gamma_a - data.a
    num = float(np.mean(dy))
    den = float(np.mean(da))
    if abs(den) < WEAK_THRESHOLD:
        raise WeakInstrument(f"plug-in denominator {den:.3g} is too close to zero",
                             delta=fit.delta, denominator=den)
    n = data.n
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), 0xB007]))
    boot_num = np.empty(bootstrap_reps)
    boot_den = np.empty(bootstrap_reps)
    for b in range(bootstrap_reps):
        idx = rng.integers(0, n, n)
        boot_num[b] = dy[idx].mean()
        boot_den[b] = da[idx].mean()
    tail = (1 - level) / 2
    dlo, dhi = np.quantile(boot_den, [tail, 1 - tail])
    if dlo <= 0 <= dhi:
        raise WeakInstrument("bootstrap interval for the plug-in denominator covers 0",
                             delta=fit.delta, interval=[float(dlo), float(dhi)])
    psi = num / den
    se = float(np.std(boot_num / boot_den, ddof=1))
    lo, hi = _pointwise(psi, se)
    return LateEstimate(fit.delta, psi, se, lo, hi, num, den, n, "plugin",
                        float(np.std(boot_den, ddof=1)))


@dataclass(frozen=True, eq=False)
class CurveEstimate:
    """Pointwise estimates over a tilt grid plus a uniform band.

    ``estimates[i]`` is None where that grid point could not be estimated;
    ``flags[i]`` then says why.
    """

    grid: tuple
    estimates: tuple
    uniform_lo: np.ndarray
    uniform_hi: np.ndarray
    band_level: float
    bootstrap_reps: int
    multiplier_quantile: float
    critical_value: float
    flags: tuple
    phi: np.ndarray | None = field(default=None, repr=False)

    @property
    def valid(self) -> np.ndarray:
        return np.array([e is not None for e in self.estimates])

    @property
    def psi(self) -> np.ndarray:
        return np.array([e.psi_hat if e is not None else np.nan for e in self.estimates])

    def to_dict(self) -> dict:
        points = []
        for i, d in enumerate(self.grid):
            est = self.estimates[i]
            if est is None:
                points.append({"delta": d, "psi_hat": None, "se": None, "ci": None,
                               "uniform": None, "n": None, "method": "influence_function",
                               "flags": list(self.flags[i])})
            else:
                points.append({"delta": d, "psi_hat": est.psi_hat, "se": est.std_error,
                               "ci": [est.ci_lo, est.ci_hi],
                               "uniform": [float(self.uniform_lo[i]), float(self.uniform_hi[i])],
                               "n": est.n, "method": est.method,
                               "flags": list(self.flags[i])})
        return {"band_level": self.band_level, "bootstrap_reps": self.bootstrap_reps,
                "multiplier_quantile": self.multiplier_quantile,
                "critical_value": self.critical_value, "points": points}


def multiplier_quantile(phi: np.ndarray, reps=1000, seed=0, level=0.95, chunk=100) -> float:
    """Quantile of ``sup_d |n^{-1/2} sum_i w_i phi_d(O_i) / sigma(d)|`` over Gaussian multipliers.

    ``phi`` has one column per grid point. Replicate ``b`` draws its
    multipliers from a stream keyed by ``(seed, b)``, so the result does not
    depend on how replicates are batched.
    """
    phi = np.asarray(phi, dtype=float)
    if phi.ndim == 1:
        phi = phi[:, None]
    n = phi.shape[0]
    sigma = np.sqrt(np.mean(phi ** 2, axis=0))
    scaled = np.divide(phi, sigma, out=np.zeros_like(phi), where=sigma > 0)
    sups = np.empty(reps)
    for start in range(0, reps, chunk):
        stop = min(reps, start + chunk)
        w = np.vstack([
            np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), 0x5EED, b]))
            .standard_normal(n) for b in range(start, stop)])
        sups[start:stop] = np.max(np.abs(w @ scaled), axis=1) / math.sqrt(n)
    return float(np.quantile(sups, level))


def _curve_point(args):
    data, d, learner, folds, fit = args
    try:
        if fit is None:
            fit = fit_nuisances(data, d, learner, folds, keep_models=False)
        est = estimate_if(data, fit)
        return est, compute_if_values(data, fit, est.psi_hat).phi, ()
    except EstimationError as exc:
        return None, None, (exc.code,)


def estimate_curve(data: Dataset, deltas: Sequence[float], learner: LearnerSpec, k=5,
                   seed=0, bootstrap_reps=1000, level=0.95, fits=None,
                   epsilon_zero=EPSILON_ZERO, workers=1) -> CurveEstimate:
    """Influence-function estimates on a tilt grid with a multiplier-bootstrap band.

    All grid points share one fold assignment. ``fits`` may supply
    precomputed nuisance fits (one per grid point). Grid points whose
    estimate fails are flagged and left out of the band. The band's
    critical value is the bootstrap quantile, raised to the pointwise normal
    quantile if it falls below it.
    """
    deltas = [float(d) for d in deltas]
    if not deltas:
        raise ValidationError("empty delta grid")
    for d in deltas:
        check_delta(d, epsilon_zero)
    if any(b <= a for a, b in zip(deltas, deltas[1:])):
        raise ValidationError("delta grid must be strictly increasing")
    folds = make_folds(data.n, k, seed) if fits is None else None
    tasks = [(data, d, learner, folds, None if fits is None else fits[i])
             for i, d in enumerate(deltas)]
    results = run_tasks(_curve_point, tasks, workers)
    estimates = [r[0] for r in results]
    phis = [r[1] for r in results]
    flags = [r[2] for r in results]
    ok = [i for i, e in enumerate(estimates) if e is not None]
    lo = np.full(len(deltas), np.nan)
    hi = np.full(len(deltas), np.nan)
    q = float("nan")
    crit = float("nan")
    phi_mat = None
    if ok:
        phi_mat = np.column_stack([phis[i] for i in ok])
        q = multiplier_quantile(phi_mat, bootstrap_reps, seed, level)
        # never narrower than the pointwise interval
        crit = max(q, float(stats.norm.ppf(0.5 + level / 2)))
        for i in ok:
            e = estimates[i]
            lo[i] = e.psi_hat - crit * e.std_error
            hi[i] = e.psi_hat + crit * e.std_error
    return CurveEstimate(tuple(deltas), tuple(estimates), lo, hi, level, int(bootstrap_reps),
                         q, crit, tuple(flags), phi_mat)


@dataclass(frozen=True)
class HomogeneityReport:
    feasible: bool
    lo: float
    hi: float
    points: int


def test_homogeneity(curve: CurveEstimate) -> HomogeneityReport:
    """Whether one horizontal line fits inside the uniform band at every valid grid point."""
    ok = curve.valid
    if ok.sum() < 2:
        raise ValidationError("homogeneity test needs at least 2 valid grid points")
    lo = float(np.max(curve.uniform_lo[ok]))
    hi = float(np.min(curve.uniform_hi[ok]))
    feasible = lo <= hi
    return HomogeneityReport(feasible, lo if feasible else float("nan"),
                             hi if feasible else float("nan"), int(ok.sum()))


test_homogeneity.__test__ = False


def _xi_for(data, delta, fit):
    if delta == 0.0:
        return data.y, data.a, data.a
    w = _tilt_weight(data, fit)
    return xi_values(data.y, w, fit.gamma_y), xi_values(data.a, w, fit.gamma_a), fit.gamma_a


def _check_two_tilt_delta(d, epsilon_zero):
    if d != 0.0:
        check_delta(d, epsilon_zero)


def estimate_two_tilt(data: Dataset, delta1: float, delta2: float, learner: LearnerSpec,
                      k=5, seed=0, fits=None, epsilon_zero=EPSILON_ZERO) -> LateEstimate:
    """Effect among units treated under the ``delta1`` tilt but not the ``delta2`` tilt.

    A zero tilt is handled exactly through ``xi(T; 0) = T``. ``fits`` may
    pass ``(fit1, fit2)`` with ``None`` for a zero tilt.
    """
    delta1, delta2 = float(delta1), float(delta2)
    if delta1 <= delta2:
        raise BadOrder(f"need delta1 > delta2, got {delta1:g} <= {delta2:g}",
                       delta1=delta1, delta2=delta2)
    _check_two_tilt_delta(delta1, epsilon_zero)
    _check_two_tilt_delta(delta2, epsilon_zero)
    if fits is None:
        folds = make_folds(data.n, k, seed)
        fits = tuple(None if d == 0.0 else fit_nuisances(data, d, learner, folds,
                                                         keep_models=False)
                     for d in (delta1, delta2))
    xy1, xa1, ga1 = _xi_for(data, delta1, fits[0])
    xy2, xa2, ga2 = _xi_for(data, delta2, fits[1])
    theta_y = xy1 - xy2
    theta_a = xa1 - xa2
    num = float(np.mean(theta_y))
    den = float(np.mean(theta_a))
    if abs(den) < WEAK_THRESHOLD:
        raise WeakInstrument(f"estimated complier mass {den:.3g} is too close to zero",
                             delta1=delta1, delta2=delta2, denominator=den)
    psi = num / den
    plug_den = float(np.mean(ga1 - ga2))
    if abs(plug_den) < WEAK_THRESHOLD:
        raise WeakInstrument(f"plug-in denominator {plug_den:.3g} is too close to zero",
                             delta1=delta1, delta2=delta2, denominator=plug_den)
    phi = (theta_y - psi * theta_a) / plug_den
    n = data.n
    se = math.sqrt(float(np.mean(phi ** 2)) / n)
    lo, hi = _pointwise(psi, se)
    return LateEstimate(delta1, psi, se, lo, hi, num, den, n, "influence_function",
                        float(np.std(theta_a) / math.sqrt(n)), delta2=delta2)
