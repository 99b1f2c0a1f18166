"""Sensitivity of the tilted LATE to violations of monotonicity.

With a share ``g1`` of defiers whose average effect differs from the
compliers' by ``g2``, the effect among compliers becomes

    xi(g1, g2) = psi_hat + g1 * g2 / denominator

where ``denominator`` is the doubly robust complier mass (for a downward
tilt, the mass of units treated only under the observed instrument).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ValidationError, WeakInstrument
from .estimators import WEAK_THRESHOLD, LateEstimate
from .nuisance import NuisanceFit
from .profiling import complier_normalizer


@dataclass(frozen=True, eq=False)
class SensitivityGrid:
    delta: float
    psi_hat: float
    denominator: float
    gamma1_values: np.ndarray
    gamma2_values: np.ndarray
    xi_hat: np.ndarray
    frontier: tuple

    @property
    def frontier_product(self) -> float:
        """The constant ``g1 * g2`` along the sign-change frontier."""
        return -self.psi_hat * self.denominator

    def to_dict(self):
        return {"delta": self.delta, "psi_hat": self.psi_hat, "denominator": self.denominator,
                "gamma1": self.gamma1_values.tolist(), "gamma2": self.gamma2_values.tolist(),
                "xi": self.xi_hat.tolist(), "frontier": [list(p) for p in self.frontier]}


def sensitivity_denominator(data: Dataset, fit: NuisanceFit) -> float:
    den = complier_normalizer(data, fit)
    return den if fit.delta > 0 else -den


def adjusted_estimate(psi_hat, denominator, gamma1, gamma2):
    return psi_hat + np.multiply.outer(np.asarray(gamma1, dtype=float),
                                       np.asarray(gamma2, dtype=float)) / denominator


def _frontier(g1, g2, xi, product):
    points = set()
    for i, a in enumerate(g1):
        if a == 0:
            continue
        row = xi[i]
        for j in range(len(g2) - 1):
            if row[j] == 0 or row[j] * row[j + 1] < 0:
                points.add((float(a), float(product / a)))
        if row[-1] == 0:
            points.add((float(a), float(product / a)))
    for j, b in enumerate(g2):
        if b == 0:
            continue
        col = xi[:, j]
        for i in range(len(g1) - 1):
            if col[i] * col[i + 1] < 0:
                points.add((float(product / b), float(b)))
    return tuple(sorted(points))


def sensitivity_surface(data: Dataset, fit: NuisanceFit, psi: LateEstimate,
                        gamma1_values=None, gamma2_values=None) -> SensitivityGrid:
    """Bias-adjusted estimate over a ``(g1, g2)`` grid plus its zero-crossing frontier.

    Defaults: ``g1`` on 41 points in [0, 0.2]; ``g2`` on 41 points in
    ``[-2|psi|, 2|psi|]``. Frontier points are sign changes between
    neighbouring cells, moved onto the exact curve ``g1 g2 = -psi * denominator``.
    """
    if psi.method != "influence_function":
        raise ValidationError("sensitivity analysis needs the influence-function estimate")
    if psi.delta != fit.delta:
        raise ValidationError("estimate and nuisance fit use different tilts")
    den = sensitivity_denominator(data, fit)
    if abs(den) < WEAK_THRESHOLD:
        raise WeakInstrument(f"complier mass {den:.3g} is too small", delta=fit.delta)
    g1 = np.linspace(0.0, 0.2, 41) if gamma1_values is None else np.asarray(gamma1_values, float)
    if np.any((g1 < 0) | (g1 > 1)):
        raise ValidationError("defier proportions must lie in [0, 1]")
    if gamma2_values is None:
        span = 2.0 * abs(psi.psi_hat)
        g2 = np.linspace(-span, span, 41)
    else:
        g2 = np.asarray(gamma2_values, float)
    xi = adjusted_estimate(psi.psi_hat, den, g1, g2)
    return SensitivityGrid(fit.delta, psi.psi_hat, den, g1, g2, xi,
                           _frontier(g1, g2, xi, -psi.psi_hat * den))
