"""Built-in benchmark objectives and the data they are built from."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Iterable, Optional, TextIO, Union

import numpy as np
from scipy.special import expit

from .core import FiniteSumProblem, InputError, sequential_mean

PROBLEM_KINDS = ("least_squares", "logistic", "robust_nonconvex")
SYNTH_KINDS = ("gaussian_ls", "separable_logistic")


class ParseError(InputError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(eq=False)
class Dataset:
    """Rows stored in compressed sparse row form with 0-based indices.

    Row ``i`` owns ``indices[indptr[i]:indptr[i+1]]`` and the matching
    ``values``. Explicit zeros are kept so that text round-trips are exact.
    """

    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    labels: np.ndarray
    feature_dim: int
    planted: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.indptr = np.asarray(self.indptr, dtype=np.int64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=float)
        self.labels = np.asarray(self.labels, dtype=float)
        if self.indptr.shape != (len(self.labels) + 1,):
            raise InputError("indptr must have one entry per row plus one")
        for i in range(self.N):
            cols = self.indices[self.indptr[i]:self.indptr[i + 1]]
            if cols.size and (cols[0] < 0 or cols[-1] >= self.feature_dim or np.any(np.diff(cols) <= 0)):
                raise InputError(f"row {i}: indices must be strictly increasing within [0, {self.feature_dim})")

    @property
    def N(self) -> int:
        return len(self.labels)

    @classmethod
    def from_dense(cls, X, labels, planted=None) -> "Dataset":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        labels = np.asarray(labels, dtype=float).reshape(-1)
        if X.shape[0] != labels.shape[0]:
            raise InputError(f"{X.shape[0]} rows but {labels.shape[0]} labels")
        n, d = X.shape
        return cls(
            indptr=np.arange(n + 1) * d,
            indices=np.tile(np.arange(d), n),
            values=X.reshape(-1).copy(),
            labels=labels.copy(),
            feature_dim=d,
            planted=planted,
        )

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return self.indices[lo:hi], self.values[lo:hi]

    def to_dense(self) -> np.ndarray:
        X = np.zeros((self.N, self.feature_dim))
        rows = np.repeat(np.arange(self.N), np.diff(self.indptr))
        X[rows, self.indices] = self.values
        return X

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.feature_dim == other.feature_dim
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.labels, other.labels)
        )


def parse_libsvm(stream: Union[TextIO, str, Iterable[str]], feature_dim: Optional[int] = None) -> Dataset:
    """Read ``<label> <index>:<value> ...`` lines (1-based indices).

    Blank lines and anything after ``#`` are ignored. ``feature_dim``
    overrides the inferred dimension (the largest index seen).
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    indptr, indices, values, labels = [0], [], [], []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        try:
            labels.append(float(tokens[0]))
        except ValueError:
            raise ParseError(f"non-numeric label {tokens[0]!r}", lineno) from None
        prev = 0
        for tok in tokens[1:]:
            idx_s, sep, val_s = tok.partition(":")
            if not sep:
                raise ParseError(f"expected index:value, got {tok!r}", lineno)
            try:
                idx, val = int(idx_s), float(val_s)
            except ValueError:
                raise ParseError(f"non-numeric token {tok!r}", lineno) from None
            if idx < 1:
                raise ParseError(f"index {idx} < 1", lineno)
            if idx <= prev:
                raise ParseError(f"non-increasing index {idx} after {prev}", lineno)
            prev = idx
            indices.append(idx - 1)
            values.append(val)
        indptr.append(len(indices))
    inferred = max(indices) + 1 if indices else 0
    if feature_dim is None:
        feature_dim = inferred
    elif feature_dim < inferred:
        raise InputError(f"feature_dim override {feature_dim} is below the largest index {inferred}")
    return Dataset(np.array(indptr), np.array(indices, dtype=np.int64), np.array(values, dtype=float),
                   np.array(labels, dtype=float), int(feature_dim))


def _format_label(y: float) -> str:
    if float(y).is_integer() and abs(y) < 2**53:
        return f"{int(y):+d}"
    return repr(float(y))


def serialize_libsvm(dataset: Dataset, stream: Optional[TextIO] = None) -> str:
    """Write ``dataset`` in LIBSVM format; floats use shortest round-trip repr.

    A dimension above the largest stored index is not representable in the
    format; pass ``feature_dim`` back to :func:`parse_libsvm` in that case.
    """
    lines = []
    for i in range(dataset.N):
        cols, vals = dataset.row(i)
        parts = [_format_label(dataset.labels[i])]
        parts += [f"{c + 1}:{float(v)!r}" for c, v in zip(cols, vals)]
        lines.append(" ".join(parts))
    text = "".join(line + "\n" for line in lines)
    if stream is not None:
        stream.write(text)
    return text


def synth_data(seed: int, N: int, d: int, kind: str, noise: float = 0.0, scale: float = 1.0) -> Dataset:
    """Draw a synthetic dataset around a hidden ``planted`` parameter vector.

    ``gaussian_ls`` labels are ``a @ x_star + noise * eps``; ``separable_logistic``
    labels are ``sign(a @ x_star)`` flipped with probability ``noise``.
    Rows are standard normal times ``scale``.
    """
    if N < 1 or d < 1:
        raise InputError(f"need N, d >= 1, got N={N}, d={d}")
    if kind not in SYNTH_KINDS:
        raise InputError(f"unknown synthetic kind {kind!r}; expected one of {SYNTH_KINDS}")
    rng = np.random.default_rng(seed)
    X = scale * rng.standard_normal((N, d))
    x_star = rng.standard_normal(d)
    margin = np.sum(X * x_star, axis=1)
    if kind == "gaussian_ls":
        y = margin + noise * rng.standard_normal(N)
    else:
        if not 0.0 <= noise <= 1.0:
            raise InputError("label-flip probability must lie in [0, 1]")
        y = np.where(margin >= 0, 1.0, -1.0)
        flips = rng.random(N) < noise
        y[flips] = -y[flips]
    return Dataset.from_dense(X, y, planted=x_star)


def _rowdot(A: np.ndarray, x: np.ndarray) -> np.ndarray:
    # Row-wise reduction keeps each component's result independent of the batch.
    return np.sum(A * x, axis=1)


class LinearModelProblem(FiniteSumProblem):
    """Objective whose components depend on ``x`` through ``a_i @ x`` only.

    ``f_i(x) = loss(a_i @ x, y_i) + (reg / 2) ||x||^2``. Subclasses supply the
    scalar loss and its first two derivatives in the margin.
    """

    def __init__(self, dataset: Dataset, reg: float = 0.0):
        if dataset.N == 0:
            raise InputError("dataset is empty")
        if reg < 0:
            raise InputError(f"regularization must be >= 0, got {reg}")
        super().__init__(dataset.N, max(dataset.feature_dim, 1))
        self.dataset = dataset
        self.A = dataset.to_dense()
        if self.A.shape[1] < self.d:
            self.A = np.zeros((self.N, self.d))
        self.A.setflags(write=False)
        self.y = dataset.labels.copy()
        self.y.setflags(write=False)
        self.reg = float(reg)
        self.row_sq_norms = np.sum(self.A * self.A, axis=1)

    # scalar loss in the linear prediction t = a @ x, vectorised over rows
    def _loss(self, t, y):
        raise NotImplementedError

    def _dloss(self, t, y):
        raise NotImplementedError

    def _d2loss(self, t, y):
        raise NotImplementedError

    def batch_values(self, idx, x):
        A = self.A[idx]
        return self._loss(_rowdot(A, x), self.y[idx]) + 0.5 * self.reg * float(x @ x)

    def batch_gradients(self, idx, x):
        A = self.A[idx]
        w = self._dloss(_rowdot(A, x), self.y[idx])
        return A * w[:, None] + self.reg * x

    def component_value(self, i, x):
        return float(self.batch_values(np.array([i]), x)[0])

    def component_gradient(self, i, x):
        return self.batch_gradients(np.array([i]), x)[0]

    @property
    def has_hvp(self):
        return True

    def hessian_vector_product(self, x, v):
        x = self.check_point(x)
        v = np.asarray(v, dtype=float)
        w = self._d2loss(_rowdot(self.A, x), self.y) * _rowdot(self.A, v)
        return sequential_mean(self.A * w[:, None]) + self.reg * v

    def hessian_diagonal(self, x) -> np.ndarray:
        x = self.check_point(x)
        w = self._d2loss(_rowdot(self.A, x), self.y)
        return sequential_mean(self.A * self.A * w[:, None]) + self.reg


class LeastSquaresProblem(LinearModelProblem):
    kind = "least_squares"
    name = "least_squares"

    def _loss(self, t, y):
        return 0.5 * (t - y) ** 2

    def _dloss(self, t, y):
        return t - y

    def _d2loss(self, t, y):
        return np.ones_like(t)


class LogisticProblem(LinearModelProblem):
    kind = "logistic"
    name = "logistic"

    def __init__(self, dataset, reg=0.0):
        bad = ~np.isin(dataset.labels, (-1.0, 1.0))
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise InputError(f"logistic labels must be -1 or +1; row {i} has {dataset.labels[i]}")
        super().__init__(dataset, reg)

    def _loss(self, t, y):
        # log(1 + exp(-m)) without overflow for large |m|
        return np.logaddexp(0.0, -y * t)

    def _dloss(self, t, y):
        return -y * expit(-y * t)

    def _d2loss(self, t, y):
        p = expit(y * t)
        return p * (1.0 - p)


class RobustNonconvexProblem(LinearModelProblem):
    """Bounded loss ``r^2 / (1 + r^2)`` on the residual; second derivative in [-1/2, 2]."""

    kind = "robust_nonconvex"
    name = "robust_nonconvex"

    def _loss(self, t, y):
        r2 = (t - y) ** 2
        return r2 / (1.0 + r2)

    def _dloss(self, t, y):
        r = t - y
        return 2.0 * r / (1.0 + r * r) ** 2

    def _d2loss(self, t, y):
        r2 = (t - y) ** 2
        return (2.0 - 6.0 * r2) / (1.0 + r2) ** 3


def make_least_squares(dataset: Dataset, reg: float = 0.0) -> LeastSquaresProblem:
    return LeastSquaresProblem(dataset, reg)


def make_logistic(dataset: Dataset, reg: float = 0.0) -> LogisticProblem:
    return LogisticProblem(dataset, reg)


def make_robust_nonconvex(dataset: Dataset, reg: float = 0.0) -> RobustNonconvexProblem:
    return RobustNonconvexProblem(dataset, reg)


def make_problem(kind: str, dataset: Dataset, reg: float = 0.0) -> LinearModelProblem:
    makers = {
        "least_squares": make_least_squares,
        "logistic": make_logistic,
        "robust_nonconvex": make_robust_nonconvex,
    }
    if kind not in makers:
        raise InputError(f"unknown problem kind {kind!r}; expected one of {PROBLEM_KINDS}")
    return makers[kind](dataset, reg)
