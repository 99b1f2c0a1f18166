"""Regression learners used for the nuisance products.

Every learner fits several targets at once on the same covariates, which
lets the kernel and shared-split forest learners reuse one set of
smoothing weights for all of them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np

from .errors import ValidationError

_KINDS = ("linear", "kernel", "forest")

_DEFAULTS = {
    "linear": {"ridge": 0.0, "link": "auto"},
    "kernel": {"bandwidth": "auto"},
    "forest": {"trees": 100, "min_leaf": 5, "max_depth": None, "max_features": 1.0,
               "shared_splits": True},
}


@dataclass(frozen=True)
class LearnerSpec:
    """Learner kind plus hyperparameters.

    kernel
        ``bandwidth`` is ``"auto"`` (Silverman's rule) or a positive
        multiplier applied to each covariate's standard deviation.
    forest
        ``trees``, ``min_leaf``, ``max_depth`` (None for unlimited),
        ``max_features`` (fraction of covariates tried per split) and
        ``shared_splits`` (one multi-output forest for all targets).
    linear
        ``ridge`` penalty on standardised slopes and ``link``: ``"identity"``,
        ``"log"`` (Gamma quasi-likelihood, nonnegative targets only) or
        ``"auto"`` (log link; a target of mixed sign is split into its
        positive and negative parts, each fitted log-linearly).
    """

    kind: str
    hyperparams: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValidationError(f"unknown learner kind {self.kind!r}")
        hp = dict(_DEFAULTS[self.kind])
        given = dict(self.hyperparams) if not isinstance(self.hyperparams, Mapping) \
            else dict(self.hyperparams)
        unknown = set(given) - set(hp)
        if unknown:
            raise ValidationError(f"unknown {self.kind} hyperparameter(s): {sorted(unknown)}")
        hp.update(given)
        _validate(self.kind, hp)
        object.__setattr__(self, "hyperparams", tuple(sorted(hp.items())))

    @property
    def params(self) -> dict:
        return dict(self.hyperparams)

    @classmethod
    def linear(cls, ridge=0.0, link="auto", seed=0):
        return cls("linear", {"ridge": ridge, "link": link}, seed)

    @classmethod
    def kernel(cls, bandwidth="auto", seed=0):
        return cls("kernel", {"bandwidth": bandwidth}, seed)

    @classmethod
    def forest(cls, trees=100, min_leaf=5, max_depth=None, max_features=1.0,
               shared_splits=True, seed=0):
        return cls("forest", {"trees": trees, "min_leaf": min_leaf, "max_depth": max_depth,
                              "max_features": max_features, "shared_splits": shared_splits},
                   seed)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "hyperparams": self.params, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d.get("hyperparams", {}), d.get("seed", 0))


def _validate(kind, hp):
    if kind == "linear":
        if not (_is_num(hp["ridge"]) and hp["ridge"] >= 0):
            raise ValidationError("ridge penalty must be >= 0")
        if hp["link"] not in ("auto", "identity", "log"):
            raise ValidationError("link must be auto, identity or log")
    elif kind == "kernel":
        bw = hp["bandwidth"]
        if bw != "auto" and not (_is_num(bw) and bw > 0):
            raise ValidationError("bandwidth must be 'auto' or > 0")
    else:
        for key in ("trees", "min_leaf"):
            if not (_is_int(hp[key]) and hp[key] >= 1):
                raise ValidationError(f"{key} must be an integer >= 1")
        if hp["max_depth"] is not None and not (_is_int(hp["max_depth"]) and hp["max_depth"] >= 1):
            raise ValidationError("max_depth must be None or an integer >= 1")
        mf = hp["max_features"]
        if not (_is_num(mf) and 0 < mf <= 1):
            raise ValidationError("max_features must lie in (0, 1]")
        if not isinstance(hp["shared_splits"], bool):
            raise ValidationError("shared_splits must be true or false")


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _is_int(v):
    return _is_num(v) and float(v).is_integer()


def _scale(x):
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return mu, sd


class LinearLearner:
    """Ridge regression on standardised covariates, optionally log-linear."""

    def __init__(self, ridge=0.0, link="auto"):
        self.ridge = float(ridge)
        self.link = link
        self.diagnostics: dict[str, Any] = {}

    def _design(self, x):
        return np.column_stack([np.ones(x.shape[0]), (x - self._mu) / self._sd])

    def _solve(self, gram, rhs, penalty):
        lam = self.ridge
        p = gram.shape[0]
        pen = np.eye(p)
        pen[0, 0] = 0.0
        if lam == 0.0 and np.linalg.matrix_rank(gram) < p:
            lam = 1e-8
            self.diagnostics["ridge_fallback"] = lam
        try:
            return np.linalg.solve(gram + lam * penalty * pen, rhs)
        except np.linalg.LinAlgError:
            self.diagnostics["ridge_fallback"] = 1e-8
            return np.linalg.solve(gram + 1e-8 * penalty * pen, rhs)

    def _fit_identity(self, d, y):
        n = d.shape[0]
        return self._solve(d.T @ d, d.T @ y, n)

    def _fit_log(self, d, y):
        # strictly positive targets: Gamma quasi-likelihood, which suits the
        # multiplicative noise of exponential targets; with zeros present that
        # loss is unbounded below, so fall back to Poisson quasi-likelihood
        n = d.shape[0]
        scale = y.mean()
        if scale <= 0:
            beta = np.zeros(d.shape[1])
            beta[0] = -745.0
            return beta
        t = y / scale
        gamma = bool(t.min() > 0)
        beta = np.zeros(d.shape[1])

        def terms(b):
            eta = np.clip(d @ b, -700, 700)
            if gamma:
                r = t * np.exp(-eta)
                return float(np.sum(r + eta)), 1.0 - r, r
            mu = np.exp(eta)
            return float(np.sum(mu - t * eta)), mu - t, mu

        def objective(b):
            return terms(b)[0] + 0.5 * self.ridge * n * (b[1:] @ b[1:])

        obj = objective(beta)
        for _ in range(200):
            _, score, weight = terms(beta)
            grad = d.T @ score
            grad[1:] += self.ridge * n * beta[1:]
            hess = (d * weight[:, None]).T @ d
            step = self._solve(hess, grad, n)
            tstep = 1.0
            for _ in range(60):
                cand = beta - tstep * step
                cobj = objective(cand)
                if cobj <= obj + 1e-12 * abs(obj):
                    break
                tstep *= 0.5
            beta, obj = cand, cobj
            if np.max(np.abs(tstep * step)) < 1e-11:
                break
        beta = beta.copy()
        beta[0] += math.log(scale)
        return beta

    def fit(self, x, y):
        y = np.asarray(y, dtype=float)
        y = y.reshape(len(y), -1)
        self._mu, self._sd = _scale(x)
        d = self._design(x)
        self._parts = []
        for j in range(y.shape[1]):
            col = y[:, j]
            link = self.link
            if link == "log" and col.min() < 0:
                raise ValidationError("log link requires a nonnegative target")
            if link == "identity":
                self._parts.append(("identity", self._fit_identity(d, col)))
            elif col.min() >= 0:
                self._parts.append(("log", self._fit_log(d, col)))
            else:
                # mixed sign: log-linear fits of the positive and negative parts
                self._parts.append(("split", (self._fit_log(d, np.maximum(col, 0.0)),
                                              self._fit_log(d, np.maximum(-col, 0.0)))))
        return self

    def predict(self, x):
        d = self._design(x)
        exp = lambda b: np.exp(np.clip(d @ b, -745, 700))
        cols = []
        for link, coef in self._parts:
            if link == "identity":
                cols.append(d @ coef)
            elif link == "log":
                cols.append(exp(coef))
            else:
                cols.append(exp(coef[0]) - exp(coef[1]))
        return np.column_stack(cols)


def silverman_bandwidths(x):
    n, d = x.shape
    sd = x.std(axis=0, ddof=1) if n > 1 else np.ones(d)
    sd = np.where(sd > 0, sd, 1.0)
    return sd * (4.0 / ((d + 2.0) * n)) ** (1.0 / (d + 4.0))


class KernelLearner:
    """Nadaraya-Watson smoother with a product Gaussian kernel."""

    chunk = 2048

    def __init__(self, bandwidth="auto"):
        self.bandwidth = bandwidth
        self.diagnostics: dict[str, Any] = {}

    def fit(self, x, y):
        x = np.asarray(x, dtype=float)
        if self.bandwidth == "auto":
            h = silverman_bandwidths(x)
        else:
            sd = x.std(axis=0, ddof=1)
            h = float(self.bandwidth) * np.where(sd > 0, sd, 1.0)
        self.h = h
        self._u = x / h
        self._u2 = np.einsum("ij,ij->i", self._u, self._u)
        y = np.asarray(y, dtype=float)
        self._y = y.reshape(len(y), -1)
        self.diagnostics["bandwidths"] = h.tolist()
        return self

    def weights(self, x):
        """Row-normalised kernel weights of shape (len(x), n_train)."""
        v = np.asarray(x, dtype=float) / self.h
        d2 = np.einsum("ij,ij->i", v, v)[:, None] + self._u2[None, :] - 2.0 * (v @ self._u.T)
        d2 -= d2.min(axis=1, keepdims=True)
        w = np.exp(-0.5 * d2)
        w /= w.sum(axis=1, keepdims=True)
        return w

    def predict(self, x):
        x = np.asarray(x, dtype=float)
        out = np.empty((x.shape[0], self._y.shape[1]))
        for s in range(0, x.shape[0], self.chunk):
            out[s:s + self.chunk] = self.weights(x[s:s + self.chunk]) @ self._y
        return out


class ForestLearner:
    """Bagged CART regression forest (scikit-learn trees).

    Training rows are put in a canonical order first, so the fit depends
    only on the multiset of training rows and the seed. With
    ``shared_splits`` one forest is grown on variance-standardised targets,
    giving every target the same partition and hence the same averaging
    weights.
    """

    def __init__(self, trees=100, min_leaf=5, max_depth=None, max_features=1.0,
                 shared_splits=True, seed=0):
        self.trees = int(trees)
        self.min_leaf = int(min_leaf)
        self.max_depth = None if max_depth is None else int(max_depth)
        self.max_features = float(max_features)
        self.shared_splits = bool(shared_splits)
        self.seed = seed
        self.diagnostics: dict[str, Any] = {}

    def _forest(self, salt):
        from sklearn.ensemble import RandomForestRegressor

        seq = np.random.SeedSequence([int(self.seed) & (2**64 - 1), salt])
        return RandomForestRegressor(
            n_estimators=self.trees, min_samples_leaf=self.min_leaf,
            max_depth=self.max_depth, max_features=self.max_features, bootstrap=True,
            random_state=int(seq.generate_state(1)[0]), n_jobs=1)

    def fit(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        y = y.reshape(len(y), -1)
        keys = np.column_stack([x, y])
        order = np.lexsort(keys.T[::-1])
        x, y = x[order], y[order]
        sd = y.std(axis=0)
        self._sd = np.where(sd > 0, sd, 1.0)
        ys = y / self._sd
        if self.shared_splits or ys.shape[1] == 1:
            self._models = [self._forest(0).fit(x, ys if ys.shape[1] > 1 else ys[:, 0])]
        else:
            self._models = [self._forest(j).fit(x, ys[:, j]) for j in range(ys.shape[1])]
        self._k = ys.shape[1]
        return self

    def predict(self, x):
        x = np.asarray(x, dtype=float)
        if len(self._models) == 1:
            p = self._models[0].predict(x).reshape(x.shape[0], -1)
        else:
            p = np.column_stack([m.predict(x) for m in self._models])
        return p * self._sd


def make_learner(spec: LearnerSpec, fold: int = 0):
    hp = spec.params
    if spec.kind == "linear":
        return LinearLearner(hp["ridge"], hp["link"])
    if spec.kind == "kernel":
        return KernelLearner(hp["bandwidth"])
    seed = int(np.random.SeedSequence([int(spec.seed) & (2**64 - 1), int(fold)])
               .generate_state(1)[0])
    return ForestLearner(hp["trees"], hp["min_leaf"], hp["max_depth"], hp["max_features"],
                         hp["shared_splits"], seed)
