"""Finite-sum problem abstraction, iterate state and seeded random streams.

All sums over components are accumulated sequentially in ascending index
order (``sequential_mean``), so every reduction in the package is
bit-reproducible for fixed inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class TRSVRError(Exception):
    """Base class for errors raised by this package."""


class InputError(TRSVRError, ValueError):
    """Malformed user input (shapes, indices, labels, parameters)."""


class ConfigurationError(TRSVRError, ValueError):
    """An option combination that cannot be honoured; ``key`` names the option."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class NumericFailure(TRSVRError, ArithmeticError):
    """A non-finite value was produced; carries the offending component."""

    def __init__(self, message: str, component: Optional[int] = None):
        super().__init__(message)
        self.component = component


class ContractViolation(TRSVRError, RuntimeError):
    """An internal precondition between cooperating objects was broken."""


def sequential_mean(rows: np.ndarray) -> np.ndarray:
    """Mean of the rows of a 2-D array, accumulated in row order.

    ``np.sum(axis=0)`` uses blocked pairwise summation whose grouping is an
    implementation detail; a cumulative sum is strictly sequential.
    """
    rows = np.asarray(rows, dtype=float)
    if rows.ndim == 1:
        rows = rows[:, None]
    return np.cumsum(rows, axis=0)[-1] / rows.shape[0]


def _first_nonfinite(values: np.ndarray) -> int:
    bad = ~np.isfinite(values)
    if bad.ndim > 1:
        bad = bad.any(axis=tuple(range(1, bad.ndim)))
    return int(np.flatnonzero(bad)[0])


class FiniteSumProblem:
    """Objective ``f(x) = (1/N) sum_i f_i(x)`` with 0-based component indices.

    Subclasses implement :meth:`component_value` and
    :meth:`component_gradient`; the batched variants below fall back to
    looping over components and should be overridden when a vectorised form
    exists. A problem is immutable after construction.
    """

    name: str = "finite_sum"
    kind: str = "generic"

    def __init__(self, N: int, d: int, name: Optional[str] = None):
        if N < 1 or d < 1:
            raise InputError(f"need N >= 1 and d >= 1, got N={N}, d={d}")
        self.N = int(N)
        self.d = int(d)
        if name is not None:
            self.name = name

    def component_value(self, i: int, x: np.ndarray) -> float:
        raise NotImplementedError

    def component_gradient(self, i: int, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def batch_values(self, idx: np.ndarray, x: np.ndarray) -> np.ndarray:
        return np.array([self.component_value(int(i), x) for i in idx], dtype=float)

    def batch_gradients(self, idx: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Component gradients stacked as rows, shape ``(len(idx), d)``."""
        if len(idx) == 0:
            return np.zeros((0, self.d))
        return np.stack([self.component_gradient(int(i), x) for i in idx])

    @property
    def has_hvp(self) -> bool:
        return False

    def hessian_vector_product(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        raise ConfigurationError(f"problem {self.name!r} provides no Hessian-vector product")

    def check_point(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.d,):
            raise InputError(f"expected a point of shape ({self.d},), got {x.shape}")
        return x

    def check_indices(self, idx: Sequence[int]) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= self.N):
            raise InputError(f"component index out of range [0, {self.N})")
        return idx


class CallableProblem(FiniteSumProblem):
    """Problem assembled from plain per-component callables.

    Handy for tests and for objectives that do not fit the built-in
    linear-model family.
    """

    def __init__(
        self,
        N: int,
        d: int,
        value: Callable[[int, np.ndarray], float],
        gradient: Callable[[int, np.ndarray], np.ndarray],
        hvp: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
        name: str = "callable",
    ):
        super().__init__(N, d, name)
        self._value = value
        self._gradient = gradient
        self._hvp = hvp

    def component_value(self, i, x):
        return float(self._value(i, x))

    def component_gradient(self, i, x):
        return np.asarray(self._gradient(i, x), dtype=float).reshape(self.d)

    @property
    def has_hvp(self):
        return self._hvp is not None

    def hessian_vector_product(self, x, v):
        if self._hvp is None:
            return super().hessian_vector_product(x, v)
        return np.asarray(self._hvp(x, v), dtype=float)


def batch_gradient_rows(problem: FiniteSumProblem, idx, x) -> np.ndarray:
    """Validated component gradients for ``idx`` in ascending index order."""
    x = problem.check_point(x)
    idx = np.sort(problem.check_indices(idx), kind="stable")
    rows = problem.batch_gradients(idx, x)
    if not np.all(np.isfinite(rows)):
        j = _first_nonfinite(rows)
        raise NumericFailure(f"non-finite gradient of component {int(idx[j])}", int(idx[j]))
    return rows


def evaluate_objective(problem: FiniteSumProblem, x) -> float:
    """Return ``(1/N) sum_i f_i(x)``, summed in ascending component order."""
    x = problem.check_point(x)
    values = problem.batch_values(np.arange(problem.N), x)
    if not np.all(np.isfinite(values)):
        j = _first_nonfinite(values)
        raise NumericFailure(f"non-finite value of component {j}", j)
    return float(sequential_mean(values)[0])


def full_gradient(problem: FiniteSumProblem, x) -> np.ndarray:
    """Mean of all component gradients at ``x``."""
    return sequential_mean(batch_gradient_rows(problem, np.arange(problem.N), x))


@dataclass(frozen=True)
class RandomSource:
    """Seeded family of independent streams addressed by ``(k, s)``.

    ``tag`` separates unrelated consumers (batch sampling, Monte-Carlo
    replays) that share a seed.
    """

    seed: int
    tag: int = 0

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise InputError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def stream(self, k: int, s: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([int(self.seed), self.tag, int(k), int(s)]))

    def child(self, tag: int) -> "RandomSource":
        return RandomSource(self.seed, tag)


@dataclass
class IterateState:
    """Driver state at inner step ``s`` of outer loop ``k``.

    Build with :meth:`at_anchor`, which computes the anchor's full gradient
    and remembers where it was taken so a stale cache can be detected.
    """

    k: int
    s: int
    x: np.ndarray
    anchor: np.ndarray
    anchor_full_gradient: np.ndarray
    radius: float
    anchor_gradient_point: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def at_anchor(cls, problem: FiniteSumProblem, k: int, x, radius: float = 1.0) -> "IterateState":
        x = problem.check_point(x).copy()
        g0 = full_gradient(problem, x)
        return cls(k=k, s=0, x=x.copy(), anchor=x, anchor_full_gradient=g0,
                   radius=radius, anchor_gradient_point=x.copy())

    def anchor_is_current(self) -> bool:
        return self.anchor_gradient_point is not None and np.array_equal(
            self.anchor_gradient_point, self.anchor
        )
