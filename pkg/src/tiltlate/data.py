"""Observed-data containers, CSV ingestion and cross-fitting folds."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import (
    BadFoldCount,
    DegenerateInstrument,
    MissingColumn,
    NonBinaryTreatment,
    NonFiniteValue,
    ValidationError,
)


@dataclass(frozen=True)
class Observation:
    x: np.ndarray
    z: float
    a: int
    y: float


def _readonly(arr, dtype=float):
    out = np.array(arr, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-typed table of ``n`` observations ``(X, Z, A, Y)``.

    Arrays are copied and made read-only on construction so one instance can
    be shared freely between workers.

    Parameters
    ----------
    x : array of shape (n, d)
        Covariates.
    z : array of shape (n,)
        Continuous instrument.
    a : array of shape (n,)
        Binary treatment, values exactly 0 or 1.
    y : array of shape (n,)
        Outcome.
    column_names : optional labels for the covariate columns.
    """

    x: np.ndarray
    z: np.ndarray
    a: np.ndarray
    y: np.ndarray
    column_names: tuple[str, ...] | None = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[1] < 1:
            raise ValidationError("covariates must form an (n, d) array with d >= 1")
        n = x.shape[0]
        z = np.asarray(self.z, dtype=float).reshape(-1)
        a = np.asarray(self.a, dtype=float).reshape(-1)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if not (len(z) == len(a) == len(y) == n):
            raise ValidationError("columns have unequal lengths")
        if n < 2:
            raise ValidationError("need at least 2 rows", n=n)
        for name, col in (("x", x), ("z", z), ("a", a), ("y", y)):
            bad = ~np.isfinite(col)
            if bad.any():
                row = int(np.argwhere(bad)[0][0])
                raise NonFiniteValue(f"non-finite value in column {name!r} at row {row}",
                                     row=row, column=name)
        nonbin = (a != 0) & (a != 1)
        if nonbin.any():
            row = int(np.argmax(nonbin))
            raise NonBinaryTreatment(f"treatment value {a[row]!r} at row {row} is not 0/1",
                                     row=row)
        if np.unique(z).size < 2:
            raise DegenerateInstrument("instrument has fewer than 2 distinct values")
        if self.column_names is not None:
            names = tuple(self.column_names)
            if len(names) != x.shape[1]:
                raise ValidationError("column_names length does not match d")
            object.__setattr__(self, "column_names", names)
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "z", _readonly(z))
        object.__setattr__(self, "a", _readonly(a))
        object.__setattr__(self, "y", _readonly(y))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def __len__(self):
        return self.n

    def __getitem__(self, i) -> Observation:
        return Observation(self.x[i], float(self.z[i]), int(self.a[i]), float(self.y[i]))

    @property
    def rows(self) -> Iterator[Observation]:
        return (self[i] for i in range(self.n))

    @classmethod
    def from_rows(cls, rows: Sequence[Observation], column_names=None) -> "Dataset":
        rows = list(rows)
        if not rows:
            raise ValidationError("need at least 2 rows", n=0)
        dims = {np.atleast_1d(r.x).size for r in rows}
        if len(dims) != 1:
            raise ValidationError("rows have differing covariate dimension")
        return cls(
            x=np.vstack([np.atleast_1d(r.x) for r in rows]),
            z=[r.z for r in rows],
            a=[r.a for r in rows],
            y=[r.y for r in rows],
            column_names=column_names,
        )

    def with_outcome(self, y) -> "Dataset":
        return Dataset(self.x, self.z, self.a, y, self.column_names)

    def equals(self, other: "Dataset") -> bool:
        return (
            np.array_equal(self.x, other.x)
            and np.array_equal(self.z, other.z)
            and np.array_equal(self.a, other.a)
            and np.array_equal(self.y, other.y)
        )


@dataclass(frozen=True)
class CsvSchema:
    """Names of the CSV columns that hold each component of ``O``."""

    z: str
    a: str
    y: str
    x: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(self.x))
        if not self.x:
            raise ValidationError("schema needs at least one covariate column")


def _parse_float(text, row, column):
    s = text.strip()
    if s == "":
        raise NonFiniteValue(f"missing value in column {column!r} at row {row}",
                             row=row, column=column)
    try:
        value = float(s)
    except ValueError:
        raise NonFiniteValue(f"unparseable value {text!r} in column {column!r} at row {row}",
                             row=row, column=column) from None
    if not math.isfinite(value):
        raise NonFiniteValue(f"non-finite value in column {column!r} at row {row}",
                             row=row, column=column)
    return value


def load_csv(path, schema: CsvSchema | Mapping) -> Dataset:
    """Read a header-row CSV, selecting columns by name.

    Row numbers in error messages are 1-based data rows (the header is not
    counted), matching what a user sees below the header in a spreadsheet.
    """
    if isinstance(schema, Mapping):
        schema = CsvSchema(**schema)
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path} is empty") from None
        wanted = [schema.z, schema.a, schema.y, *schema.x]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise MissingColumn(f"missing column(s): {', '.join(missing)}", columns=missing)
        idx = {c: header.index(c) for c in wanted}
        cols = {c: [] for c in wanted}
        for rownum, rec in enumerate(reader, start=1):
            if not rec:
                continue
            if len(rec) != len(header):
                raise NonFiniteValue(f"row {rownum} has {len(rec)} fields, expected {len(header)}",
                                     row=rownum)
            for c in wanted:
                cols[c].append(_parse_float(rec[idx[c]], rownum, c))
    a = np.array(cols[schema.a])
    nonbin = (a != 0) & (a != 1)
    if nonbin.any():
        row = int(np.argmax(nonbin)) + 1
        raise NonBinaryTreatment(f"treatment value {a[row - 1]!r} at row {row} is not 0/1",
                                 row=row)
    return Dataset(
        x=np.column_stack([cols[c] for c in schema.x]),
        z=cols[schema.z],
        a=a,
        y=cols[schema.y],
        column_names=schema.x,
    )


def write_csv(data: Dataset, path, schema: CsvSchema | None = None) -> CsvSchema:
    """Write ``data`` so that ``load_csv(path, schema)`` reproduces it exactly.

    Floats are written with ``repr`` which round-trips IEEE doubles.
    """
    if schema is None:
        names = data.column_names or tuple(f"x{j + 1}" for j in range(data.d))
        schema = CsvSchema(z="z", a="a", y="y", x=names)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*schema.x, schema.z, schema.a, schema.y])
        for i in range(data.n):
            w.writerow([*(repr(float(v)) for v in data.x[i]), repr(float(data.z[i])),
                        str(int(data.a[i])), repr(float(data.y[i]))])
    return schema


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    """Balanced partition of ``range(n)`` into ``k`` folds."""

    n: int
    k: int
    seed: int
    fold_of: np.ndarray = field(repr=False)

    def indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != fold)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.fold_of, minlength=self.k)

    def __eq__(self, other):
        return (isinstance(other, FoldAssignment) and self.n == other.n and self.k == other.k
                and np.array_equal(self.fold_of, other.fold_of))

    def __hash__(self):
        return hash((self.n, self.k, self.fold_of.tobytes()))


def make_folds(n: int, k: int, seed: int) -> FoldAssignment:
    """Randomly assign rows to ``k`` folds whose sizes differ by at most one."""
    if k < 2 or k > n:
        raise BadFoldCount(f"fold count k={k} must satisfy 2 <= k <= n={n}", k=k, n=n)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), 0xF01D]))
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[rng.permutation(n)] = np.arange(n) % k
    fold_of.flags.writeable = False
    return FoldAssignment(n=n, k=k, seed=int(seed), fold_of=fold_of)
