"""Cross-fitted estimation of the tilt nuisances.

For a tilt ``delta`` the three regressions of ``e^{delta Z}``,
``Y e^{delta Z}`` and ``A e^{delta Z}`` on ``X`` are fitted out of fold.
``alpha`` is the first prediction; the two ``gamma`` functions are ratios of
the others to it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .data import Dataset, FoldAssignment
from .errors import EmptyGrid, TiltOverflow, ValidationError
from .learners import LearnerSpec, make_learner
from .tilt import EPSILON_ZERO, check_delta

ALPHA_FLOOR = 1e-12
CLIP_LO = 1e-6
OVERFLOW_GUARD = 50.0
# training-loss diagnostics use an evenly spaced subsample of this size
TRAIN_LOSS_ROWS = 500


@dataclass(eq=False)
class NuisanceFit:
    """Out-of-fold nuisance predictions for one tilt.

    Row ``i`` of every array was produced by models trained on folds other
    than ``folds.fold_of[i]``. ``raw`` holds the unmodified predictions of
    the three product regressions, columns ``(e, Y e, A e)``.
    """

    delta: float
    alpha: np.ndarray
    gamma_y: np.ndarray
    gamma_a: np.ndarray
    folds: FoldAssignment | None = None
    learner: LearnerSpec | None = None
    raw: np.ndarray | None = None
    diagnostics: dict[str, Any] = field(default_factory=dict)
    models: tuple = field(default=(), repr=False)
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_arrays(cls, delta, alpha, gamma_y, gamma_a, folds=None, clip=True):
        """Wrap externally supplied nuisance values (oracles, test doubles)."""
        alpha = np.maximum(np.asarray(alpha, dtype=float), ALPHA_FLOOR)
        gamma_a = np.asarray(gamma_a, dtype=float)
        if clip:
            gamma_a = np.clip(gamma_a, CLIP_LO, 1 - CLIP_LO)
        return cls(float(delta), alpha, np.asarray(gamma_y, dtype=float), gamma_a, folds)

    @property
    def n(self) -> int:
        return self.alpha.shape[0]

    def predict(self, x, fold: int):
        """Nuisances at new covariate rows using the model held out of ``fold``."""
        if not self.models:
            raise ValidationError("fit was created without stored models")
        raw = self.models[fold].predict(np.atleast_2d(np.asarray(x, dtype=float)))
        return _finish(raw)


def _finish(raw):
    alpha = np.maximum(raw[:, 0], ALPHA_FLOOR)
    gamma_y = raw[:, 1] / alpha
    gamma_a = np.clip(raw[:, 2] / alpha, CLIP_LO, 1 - CLIP_LO)
    return alpha, gamma_y, gamma_a


def tilt_targets(data: Dataset, delta: float, epsilon_zero=EPSILON_ZERO) -> np.ndarray:
    """Columns ``(e^{dZ}, Y e^{dZ}, A e^{dZ})`` after the degeneracy and overflow checks."""
    delta = check_delta(delta, epsilon_zero)
    worst = abs(delta) * float(np.max(np.abs(data.z)))
    if worst > OVERFLOW_GUARD:
        raise TiltOverflow(f"|delta * Z| reaches {worst:.3g} > {OVERFLOW_GUARD:g}",
                           delta=delta, max_abs_z=float(np.max(np.abs(data.z))))
    e = np.exp(delta * data.z)
    return np.column_stack([e, data.y * e, data.a * e])


def cross_fit(x, targets, learner: LearnerSpec, folds: FoldAssignment, keep_models=False):
    """Out-of-fold predictions of ``targets`` on ``x``.

    Returns the prediction matrix, per-fold training MSEs (on a subsample of
    the training rows) and,
    optionally, the fitted models indexed by held-out fold.
    """
    if folds.n != x.shape[0]:
        raise ValidationError("fold assignment does not match the data size")
    pred = np.empty_like(targets)
    losses, models, notes = [], [], []
    for f in range(folds.k):
        test = folds.indices(f)
        train = folds.train_indices(f)
        model = make_learner(learner, f).fit(x[train], targets[train])
        pred[test] = model.predict(x[test])
        probe = train[:: max(1, len(train) // TRAIN_LOSS_ROWS)]
        fitted = model.predict(x[probe])
        losses.append(np.mean((fitted - targets[probe]) ** 2, axis=0).tolist())
        if model.diagnostics:
            notes.append({"fold": f, **model.diagnostics})
        if keep_models:
            models.append(model)
    return pred, losses, tuple(models), notes


def fit_nuisances(data: Dataset, delta: float, learner: LearnerSpec,
                  folds: FoldAssignment, keep_models=True,
                  epsilon_zero=EPSILON_ZERO) -> NuisanceFit:
    targets = tilt_targets(data, delta, epsilon_zero)
    raw, losses, models, notes = cross_fit(data.x, targets, learner, folds, keep_models)
    alpha, gamma_y, gamma_a = _finish(raw)
    diagnostics = {
        "train_mse": losses,
        "alpha_floored": int(np.sum(raw[:, 0] < ALPHA_FLOOR)),
        "gamma_a_clipped": int(np.sum((raw[:, 2] / alpha < CLIP_LO)
                                      | (raw[:, 2] / alpha > 1 - CLIP_LO))),
    }
    if notes:
        diagnostics["learner"] = notes
    return NuisanceFit(float(delta), alpha, gamma_y, gamma_a, folds, learner, raw,
                       diagnostics, models)


def treatment_regression(data: Dataset, fit: NuisanceFit) -> np.ndarray:
    """Out-of-fold regression of ``A`` on ``X`` with the fit's learner and folds (cached)."""
    if "lambda" not in fit._cache:
        if fit.learner is None or fit.folds is None:
            raise ValidationError("fit carries no learner/folds to regress A on X")
        pred, *_ = cross_fit(data.x, data.a[:, None], fit.learner, fit.folds)
        fit._cache["lambda"] = np.clip(pred[:, 0], 0.0, 1.0)
    return fit._cache["lambda"]


def component_cv_loss(data: Dataset, delta: float, learner: LearnerSpec,
                      folds: FoldAssignment) -> float:
    """Sum over the three product regressions of variance-normalised out-of-fold MSE."""
    targets = tilt_targets(data, delta)
    pred, *_ = cross_fit(data.x, targets, learner, folds)
    var = targets.var(axis=0)
    var = np.where(var > 0, var, 1.0)
    return float(np.sum(np.mean((pred - targets) ** 2, axis=0) / var))


def select_hyperparams(data: Dataset, delta: float, grid: Sequence[LearnerSpec],
                       folds: FoldAssignment, return_losses=False):
    """Grid element with the smallest ``component_cv_loss``; ties go to the earliest.

    This is plain component-wise cross-validation of the three product
    regressions, not a doubly robust criterion for the final estimate.
    """
    grid = list(grid)
    if not grid:
        raise EmptyGrid("hyperparameter grid is empty")
    if len(grid) == 1:
        return (grid[0], [float("nan")]) if return_losses else grid[0]
    losses = [component_cv_loss(data, delta, spec, folds) for spec in grid]
    best = grid[int(np.argmin(losses))]
    return (best, losses) if return_losses else best
