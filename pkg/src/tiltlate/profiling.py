"""Covariate profiles of the principal strata defined by a tilt.

For ``delta > 0`` the strata are compliers (treated only under the tilted
instrument), always-takers and never-takers; for ``delta < 0`` compliers are
those treated only under the observed instrument.

Each stratum probability is a weighted mean of ``f(V)`` (an indicator for
discrete ``V``, a scaled kernel for continuous ``V``) over the mean weight.
Two weightings are available. ``plain`` uses the identified weights
(e.g. ``gamma^A - A`` for compliers). ``influence_function`` uses their
uncentered influence functions (e.g. ``(gamma^A - A)(1 - e^{dZ}/alpha)``),
which is doubly robust. Both weight sets sum to one row by row across the
three strata. Standard errors always come from the influence-function
construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .data import Dataset
from .errors import EmptyStratum, ValidationError, WeakInstrument
from .estimators import WEAK_THRESHOLD, Z975, _tilt_weight, xi_values
from .nuisance import NuisanceFit, treatment_regression

STRATA = ("complier", "always", "never")


@dataclass(frozen=True)
class StrataQuery:
    v_column: int | str
    v0: float
    delta: float
    kind: str = "discrete"
    bandwidth: float | None = None
    kernel: str = "gaussian"

    def __post_init__(self):
        if self.kind not in ("discrete", "continuous"):
            raise ValidationError("kind must be discrete or continuous")
        if self.kernel not in KERNELS:
            raise ValidationError(f"unknown kernel {self.kernel!r}")
        if self.kind == "continuous" and not (self.bandwidth is not None and self.bandwidth > 0):
            raise ValidationError("continuous queries need a bandwidth > 0")


def _gaussian(u):
    return np.exp(-0.5 * u * u) / math.sqrt(2 * math.pi)


def _epanechnikov(u):
    return np.where(np.abs(u) <= 1, 0.75 * (1 - u * u), 0.0)


KERNELS = {"gaussian": _gaussian, "epanechnikov": _epanechnikov}


def silverman_1d(v):
    v = np.asarray(v, dtype=float)
    sd = v.std(ddof=1)
    iqr = np.subtract(*np.percentile(v, [75, 25]))
    spread = min(sd, iqr / 1.349) if iqr > 0 else sd
    return 0.9 * spread * v.size ** (-0.2)


def column(data: Dataset, v_column) -> np.ndarray:
    if isinstance(v_column, str):
        if data.column_names is None or v_column not in data.column_names:
            raise ValidationError(f"unknown covariate {v_column!r}")
        v_column = data.column_names.index(v_column)
    return data.x[:, int(v_column)]


def _f_values(v, query: StrataQuery):
    if query.kind == "discrete":
        return (v == query.v0).astype(float)
    h = query.bandwidth
    return KERNELS[query.kernel]((v - query.v0) / h) / h


def strata_weights(data: Dataset, fit: NuisanceFit, weights="influence_function",
                   lam=None):
    """Row weights ``(complier, always, never)``; they sum to 1 in every row."""
    if fit.n != data.n:
        raise ValidationError("nuisance fit and data have different sizes")
    a = data.a
    g = fit.gamma_a
    up = fit.delta > 0
    if weights == "plain":
        if up:
            return g - a, a, 1.0 - g
        if lam is None:
            lam = treatment_regression(data, fit)
        # compliers and always-takers as identified; never-takers use E[1 - A | X]
        return a - g, g, 1.0 - lam
    if weights != "influence_function":
        raise ValidationError("weights must be plain or influence_function")
    xi_a = xi_values(a, _tilt_weight(data, fit), g)
    if up:
        return xi_a - a, a, 1.0 - xi_a
    return a - xi_a, xi_a, 1.0 - a


def complier_normalizer(data: Dataset, fit: NuisanceFit) -> float:
    """Mean uncentered-IF complier weight; equals the IF estimator's denominator."""
    xi_a = xi_values(data.a, _tilt_weight(data, fit), fit.gamma_a)
    return float(np.mean(xi_a - data.a))


@dataclass(frozen=True)
class StratumEstimate:
    stratum: str
    v0: float
    delta: float
    estimate: float
    std_error: float
    ci_lo: float
    ci_hi: float
    plain_estimate: float
    weights: str

    def to_dict(self):
        return {"stratum": self.stratum, "v0": self.v0, "delta": self.delta,
                "estimate": self.estimate, "se": self.std_error,
                "ci": [self.ci_lo, self.ci_hi], "plain_estimate": self.plain_estimate,
                "weights": self.weights}


def _stratum_index(stratum):
    if stratum not in STRATA:
        raise ValidationError(f"stratum must be one of {STRATA}")
    return STRATA.index(stratum)


def _ratio_parts(w, f, stratum, delta):
    mw = float(np.mean(w))
    if stratum == "complier":
        if abs(mw) < WEAK_THRESHOLD:
            raise WeakInstrument(f"complier mass {mw:.3g} is too small to profile",
                                 delta=delta)
    elif mw <= 0:
        raise EmptyStratum(f"{stratum} stratum has nonpositive mass {mw:.3g}", delta=delta)
    return float(np.mean(w * f)) / mw, mw


def _plain_available(fit, stratum, lam):
    return fit.delta > 0 or stratum != "never" or lam is not None


def profile_values(data, fit, f, stratum, weights="influence_function", lam=None):
    """Estimate, SE and plain-weight estimate of ``E[f(V) | stratum]`` for per-row ``f``.

    For ``delta < 0`` the plain never-taker weight needs ``lam``, the
    out-of-fold regression of ``A`` on ``X``; without it the plain estimate
    is NaN (and requesting ``weights="plain"`` fails).
    """
    idx = _stratum_index(stratum)
    if_w = strata_weights(data, fit, "influence_function")[idx]
    est_if, m_if = _ratio_parts(if_w, f, stratum, fit.delta)
    plain = float("nan")
    if _plain_available(fit, stratum, lam):
        # only the never-taker weight reads lam; A is a harmless placeholder otherwise
        plain_w = strata_weights(data, fit, "plain", lam if lam is not None else data.a)[idx]
        plain = _ratio_parts(plain_w, f, stratum, fit.delta)[0]
    elif weights == "plain":
        raise ValidationError("plain never-taker weight for delta < 0 needs a learner")
    est = est_if if weights == "influence_function" else plain
    if stratum == "complier":
        # same normaliser as the tilted-LATE influence function
        norm = abs(float(np.mean(fit.gamma_a - data.a)))
        if norm < WEAK_THRESHOLD:
            norm = abs(m_if)
    else:
        norm = m_if
    phi = (if_w * f - est * if_w) / norm
    se = math.sqrt(float(np.mean(phi ** 2)) / data.n)
    return est, se, plain


def _lambda_if_needed(data, fit, stratum):
    if fit.delta < 0 and stratum == "never" and fit.learner is not None:
        return treatment_regression(data, fit)
    return None


def profile_stratum(data: Dataset, fit: NuisanceFit, query: StrataQuery, stratum: str,
                    weights="influence_function") -> StratumEstimate:
    """``P(V = v0 | stratum)`` (or the stratum density of ``V`` at ``v0``) with a 95% CI."""
    if query.delta != fit.delta:
        raise ValidationError("query delta does not match the nuisance fit",
                              query_delta=query.delta, fit_delta=fit.delta)
    f = _f_values(column(data, query.v_column), query)
    lam = _lambda_if_needed(data, fit, stratum)
    est, se, plain = profile_values(data, fit, f, stratum, weights, lam)
    return StratumEstimate(stratum, float(query.v0), fit.delta, est, se, est - Z975 * se,
                           est + Z975 * se, plain, weights)


def profile_curve(data: Dataset, fit: NuisanceFit, v_column, grid, stratum,
                  bandwidth=None, kernel="gaussian", weights="influence_function"):
    """Kernel-smoothed stratum density of a continuous covariate on ``grid``.

    ``bandwidth`` defaults to Silverman's rule for the covariate.
    """
    v = column(data, v_column)
    h = float(bandwidth) if bandwidth is not None else silverman_1d(v)
    lam = _lambda_if_needed(data, fit, stratum)
    out = []
    for v0 in np.asarray(grid, dtype=float):
        q = StrataQuery(v_column, float(v0), fit.delta, "continuous", h, kernel)
        est, se, plain = profile_values(data, fit, _f_values(v, q), stratum, weights, lam)
        out.append(StratumEstimate(stratum, float(v0), fit.delta, est, se, est - Z975 * se,
                                   est + Z975 * se, plain, weights))
    return out, h


def density_integral(grid, estimates) -> float:
    return float(integrate.trapezoid([e.estimate for e in estimates], grid))


@dataclass(frozen=True)
class MarginalStrata:
    delta: float
    complier: float
    always: float
    never: float
    complier_if: float
    complier_se: float
    always_se: float
    never_se: float

    def to_dict(self):
        return {"delta": self.delta, "complier": self.complier, "always": self.always,
                "never": self.never, "complier_if": self.complier_if,
                "complier_se": self.complier_se, "always_se": self.always_se,
                "never_se": self.never_se}


def marginal_strata(data: Dataset, fit: NuisanceFit) -> MarginalStrata:
    """Stratum proportions.

    ``complier, always, never`` use the identified weights with the observed
    ``A`` standing in for ``E[A | X]``, so they sum to one exactly.
    ``complier_if`` is the doubly robust complier mass with its SE.
    A negative complier mass is returned as is.
    """
    a = data.a
    g = fit.gamma_a
    if fit.delta > 0:
        plain = (g - a, a, 1.0 - g)
    else:
        plain = (a - g, g, 1.0 - a)
    c, at, nt = (float(np.mean(w)) for w in plain)
    if_w = strata_weights(data, fit, "influence_function")
    rt = math.sqrt(data.n)
    return MarginalStrata(fit.delta, c, at, nt, float(np.mean(if_w[0])),
                          float(np.std(if_w[0]) / rt), float(np.std(if_w[1]) / rt),
                          float(np.std(if_w[2]) / rt))


@dataclass(frozen=True)
class DefierBounds:
    """Compatible stratum proportions when monotonicity may fail.

    ``c1`` is the treated share under the lower instrument, ``c2`` under the
    higher one. ``t`` is the always-taker share; the others follow from it.
    """

    c1: float
    c2: float
    t_range: tuple
    defier_range: tuple
    complier_range: tuple
    never_range: tuple

    def at(self, t):
        lo, hi = self.t_range
        if not lo - 1e-15 <= t <= hi + 1e-15:
            raise ValidationError("t outside the compatible range")
        return {"always": t, "defier": self.c1 - t, "complier": self.c2 - t,
                "never": 1 - self.c1 - self.c2 + t}

    def to_dict(self):
        return {"c1": self.c1, "c2": self.c2, "t_range": list(self.t_range),
                "defier_range": list(self.defier_range),
                "complier_range": list(self.complier_range),
                "never_range": list(self.never_range)}


def defier_bounds(c1: float, c2: float) -> DefierBounds:
    for name, c in (("c1", c1), ("c2", c2)):
        if not 0 <= c <= 1:
            raise ValidationError(f"{name} must lie in [0, 1]", **{name: c})
    t_hi = min(c1, c2)
    # c1 + c2 - 1 can round above min(c1, c2) when one of them is 1
    t_lo = min(max(0.0, c1 + c2 - 1.0), t_hi)
    return DefierBounds(c1, c2, (t_lo, t_hi), (c1 - t_hi, c1 - t_lo), (c2 - t_hi, c2 - t_lo),
                        (1 - c1 - c2 + t_lo, 1 - c1 - c2 + t_hi))
