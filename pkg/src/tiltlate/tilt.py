"""Exponential tilting of the instrument law and the quantile transform.

The estimators never touch the conditional instrument density; everything
here serves the simulation harness and property tests, where that density
is known.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate, stats

from .errors import DegenerateTilt, NonMonotoneCDF, ValidationError

EPSILON_ZERO = 1e-8


@dataclass(frozen=True)
class TiltSpec:
    delta: float
    epsilon_zero: float = EPSILON_ZERO

    def __post_init__(self):
        if not self.epsilon_zero > 0:
            raise ValidationError("epsilon_zero must be positive")

    def validate(self) -> "TiltSpec":
        check_delta(self.delta, self.epsilon_zero)
        return self


def check_delta(delta, epsilon_zero=EPSILON_ZERO):
    if not math.isfinite(delta) or abs(delta) < epsilon_zero:
        raise DegenerateTilt(
            f"|delta|={abs(delta):g} is below the degeneracy threshold {epsilon_zero:g}",
            delta=delta)
    return float(delta)


@dataclass(frozen=True)
class GaussianInstrumentModel:
    """``Z | X = x ~ N(mean_fn(x), variance)``."""

    mean_fn: Callable[[np.ndarray], float]
    variance: float

    def __post_init__(self):
        if not self.variance > 0:
            raise ValidationError("variance must be strictly positive")

    @classmethod
    def linear(cls, coef, variance):
        coef = np.asarray(coef, dtype=float)
        return cls(mean_fn=lambda x: np.asarray(x, dtype=float) @ coef, variance=variance)

    def mean(self, x):
        return self.mean_fn(x)

    def cdf(self, z, x):
        return stats.norm.cdf(z, loc=self.mean(x), scale=math.sqrt(self.variance))

    def quantile(self, p, x):
        return stats.norm.ppf(p, loc=self.mean(x), scale=math.sqrt(self.variance))

    def tilted(self, delta) -> "GaussianInstrumentModel":
        shift = delta * self.variance
        inner = self.mean_fn
        return GaussianInstrumentModel(lambda x: inner(x) + shift, self.variance)

    def mgf(self, x, delta):
        """``E[exp(delta Z) | X = x]``."""
        return np.exp(delta * self.mean(x) + 0.5 * delta**2 * self.variance)


def tilted_gaussian_params(model: GaussianInstrumentModel, x, delta):
    """Mean and variance of the tilted law of a Gaussian instrument.

    Reweighting ``N(m, s2)`` by ``exp(delta z)`` gives ``N(m + delta s2, s2)``.
    """
    return model.mean(x) + delta * model.variance, model.variance


def tilted_cdf(pdf, delta, z, lower=-np.inf, upper=np.inf):
    """Tilted CDF of an arbitrary density by numerical quadrature.

    ``Q(z) = int_{lower}^{z} e^{delta u} pdf(u) du / int e^{delta u} pdf(u) du``.
    """
    def f(u):
        p = pdf(u)
        # skip exp where the density has already underflowed
        return 0.0 if p == 0.0 else math.exp(delta * u) * p

    total = integrate.quad(f, lower, upper, limit=200)[0]
    if z <= lower:
        return 0.0
    part = integrate.quad(f, lower, min(z, upper), limit=200)[0]
    return min(max(part / total, 0.0), 1.0)


def generalized_inverse(cdf, bracket=(-1.0, 1.0), tol=1e-9, max_expand=200):
    """Quantile function ``p -> inf{z : cdf(z) >= p}`` by bisection.

    The bracket grows geometrically until it straddles ``p``. Bisection stops
    once the CDF at the two ends differs by at most ``tol`` or the bracket
    collapses in floating point.
    """
    lo0, hi0 = float(min(bracket)), float(max(bracket))
    if hi0 <= lo0:
        hi0 = lo0 + 1.0

    def quantile(p):
        lo, hi = lo0, hi0
        width = hi - lo
        steps = 0
        while cdf(lo) >= p and steps < max_expand:
            width *= 2.0
            lo = hi0 - width
            steps += 1
        steps = 0
        while cdf(hi) < p and steps < max_expand:
            width *= 2.0
            hi = lo0 + width
            steps += 1
        for _ in range(400):
            mid = 0.5 * (lo + hi)
            if mid <= lo or mid >= hi:
                break
            if cdf(mid) >= p:
                hi = mid
            else:
                lo = mid
            if cdf(hi) - cdf(lo) <= tol and hi - lo <= 1e-12 * max(1.0, abs(hi)):
                break
        return hi

    return quantile


def _probe_monotone(source_cdf, z, n_probe=9):
    span = max(1.0, abs(z))
    probes = z + span * np.linspace(-4.0, 4.0, n_probe)
    vals = np.array([source_cdf(p) for p in probes], dtype=float)
    if np.any(np.diff(vals) < -1e-12):
        raise NonMonotoneCDF("source CDF decreases between probe points", z=z)
    if np.any((vals < -1e-12) | (vals > 1 + 1e-12)):
        raise NonMonotoneCDF("source CDF leaves [0, 1]", z=z)


def transform_instrument(z, source_cdf, target_quantile, check=True):
    """Rank-preserving map of ``z`` to the target law: ``Q^{-1}(Pi(z))``."""
    z = float(z)
    if check:
        _probe_monotone(source_cdf, z)
    return float(target_quantile(source_cdf(z)))


def gaussian_transform(model: GaussianInstrumentModel, x, z, delta):
    """Vectorised transform toward the tilted Gaussian law.

    Goes through the probability scale explicitly (CDF then quantile) rather
    than using the closed-form shift, so that it is a genuine check of the
    shift identity. The upper half works on the survival scale so that far
    tails do not saturate at probability 1.
    """
    sd = math.sqrt(model.variance)
    m = np.asarray(model.mean(x), dtype=float)
    u = (np.asarray(z, dtype=float) - m) / sd
    upper = u > 0
    p = np.where(upper, stats.norm.sf(u), stats.norm.cdf(u))
    q = np.where(upper, stats.norm.isf(p), stats.norm.ppf(p))
    out = np.asarray(model.tilted(delta).mean(x), dtype=float) + sd * q
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class DominanceReport:
    max_violation: float
    tolerance: float
    passed: bool
    ks_statistic: float
    n: int


def dkw_tolerance(n, level=0.01):
    return 2.0 * math.sqrt(math.log(2.0 / level) / (2.0 * n))


def _ecdf_on(sorted_sample, grid):
    return np.searchsorted(sorted_sample, grid, side="right") / sorted_sample.size


def check_dominance(samples_z, samples_z_delta, level=0.01) -> DominanceReport:
    """Empirical check that the tilted sample stochastically dominates.

    ``max_violation`` is ``sup_t F_delta(t) - F(t)`` over the pooled sample
    (never below 0 since both ECDFs vanish left of the data). For a
    downward tilt pass the arguments swapped.
    """
    z = np.sort(np.asarray(samples_z, dtype=float))
    zd = np.sort(np.asarray(samples_z_delta, dtype=float))
    if z.size == 0 or zd.size == 0:
        raise ValidationError("both samples must be nonempty")
    grid = np.concatenate([z, zd])
    diff = _ecdf_on(zd, grid) - _ecdf_on(z, grid)
    max_violation = max(0.0, float(diff.max()))
    ks = float(np.abs(diff).max())
    n = min(z.size, zd.size)
    tol = dkw_tolerance(n, level)
    return DominanceReport(max_violation, tol, max_violation <= tol, ks, n)


def two_sample_ks(a, b):
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    grid = np.concatenate([a, b])
    return float(np.abs(_ecdf_on(a, grid) - _ecdf_on(b, grid)).max())
