"""Full, mini-batch and variance-reduced gradient oracles plus batch sampling."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    ContractViolation,
    FiniteSumProblem,
    InputError,
    IterateState,
    RandomSource,
    batch_gradient_rows,
    full_gradient,
    sequential_mean,
)

FULL = "full"
MINIBATCH = "minibatch"
VARIANCE_REDUCED = "variance_reduced"

WITHOUT_REPLACEMENT = "without_replacement"
WITH_REPLACEMENT = "with_replacement"
SAMPLING_MODES = (WITHOUT_REPLACEMENT, WITH_REPLACEMENT)

MAX_ENUMERATION = 10**6


@dataclass(frozen=True)
class GradientEstimate:
    value: np.ndarray
    kind: str
    batch: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    point: np.ndarray = None

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.value))


@dataclass(frozen=True)
class BatchSampler:
    N: int
    b: int
    source: RandomSource
    mode: str = WITHOUT_REPLACEMENT

    def __post_init__(self):
        if self.mode not in SAMPLING_MODES:
            raise InputError(f"unknown sampling mode {self.mode!r}")
        if self.b < 1:
            raise InputError(f"batch size must be >= 1, got {self.b}")
        if self.mode == WITHOUT_REPLACEMENT and self.b > self.N:
            raise InputError(f"batch size {self.b} exceeds N = {self.N} without replacement")


def sample_batch(sampler: BatchSampler, k: int, s: int) -> np.ndarray:
    """Indices ``I_{k,s}``; a pure function of ``(seed, k, s)``."""
    rng = sampler.source.stream(k, s)
    if sampler.mode == WITHOUT_REPLACEMENT:
        return np.sort(rng.choice(sampler.N, size=sampler.b, replace=False))
    return np.sort(rng.integers(0, sampler.N, size=sampler.b))


def full_estimate(problem: FiniteSumProblem, x) -> GradientEstimate:
    x = problem.check_point(x)
    return GradientEstimate(full_gradient(problem, x), FULL, point=x.copy())


def minibatch_gradient(problem: FiniteSumProblem, x, batch) -> GradientEstimate:
    """Mean of the component gradients over ``batch``.

    Components are accumulated in ascending index order whatever order the
    batch lists them in, so the full index set reproduces ``full_gradient``
    bit for bit.
    """
    batch = np.sort(problem.check_indices(batch))
    if batch.size == 0:
        raise InputError("mini-batch is empty")
    x = problem.check_point(x)
    value = sequential_mean(batch_gradient_rows(problem, batch, x))
    return GradientEstimate(value, MINIBATCH, batch, x.copy())


def variance_reduced_gradient(problem: FiniteSumProblem, state: IterateState, batch) -> GradientEstimate:
    """SVRG-style estimate ``g~(x, I) - g~(anchor, I) + g(anchor)``.

    Both mini-batch terms use the same batch ``I``.
    """
    if not state.anchor_is_current():
        raise ContractViolation("anchor full gradient was not computed at the current anchor")
    at_x = minibatch_gradient(problem, state.x, batch)
    at_anchor = minibatch_gradient(problem, state.anchor, batch)
    # the bracketing makes the s = 0 case return the anchor gradient exactly
    value = (at_x.value - at_anchor.value) + state.anchor_full_gradient
    return GradientEstimate(value, VARIANCE_REDUCED, at_x.batch, at_x.point)


def _vr_errors(problem, x_s, x_0, batches: np.ndarray, g_s=None, g_0=None) -> np.ndarray:
    """Squared errors ``||g_bar - g(x_s)||^2`` for each row of ``batches``."""
    state = IterateState(0, 1, np.asarray(x_s, float), np.asarray(x_0, float),
                         full_gradient(problem, x_0) if g_0 is None else g_0, 1.0)
    state.anchor_gradient_point = state.anchor
    g_s = full_gradient(problem, x_s) if g_s is None else g_s
    out = np.empty(len(batches))
    for j, batch in enumerate(batches):
        err = variance_reduced_gradient(problem, state, batch).value - g_s
        out[j] = err @ err
    return out


def estimator_variance(problem: FiniteSumProblem, x_s, x_0, b: int, trials: int,
                       source: RandomSource, mode: str = WITHOUT_REPLACEMENT,
                       return_se: bool = False):
    """Monte-Carlo estimate of ``E ||g_bar - g(x_s)||^2`` over ``trials`` batches.

    With ``return_se`` the standard error of the estimate is returned as well.
    """
    if trials < 1:
        raise InputError("trials must be >= 1")
    sampler = BatchSampler(problem.N, b, source, mode)
    batches = np.array([sample_batch(sampler, t, 0) for t in range(trials)])
    sq = _vr_errors(problem, x_s, x_0, batches)
    mean = float(np.mean(sq))
    if not return_se:
        return mean
    se = float(np.std(sq, ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return mean, se


def count_batches(N: int, b: int, mode: str = WITHOUT_REPLACEMENT) -> int:
    return math.comb(N, b) if mode == WITHOUT_REPLACEMENT else N**b


def enumerate_batches(N: int, b: int, mode: str = WITHOUT_REPLACEMENT) -> np.ndarray:
    """Every equally likely batch: subsets without replacement, ordered tuples with."""
    total = count_batches(N, b, mode)
    if total > MAX_ENUMERATION:
        raise InputError(f"{total} batches exceed the enumeration limit {MAX_ENUMERATION}; use Monte-Carlo mode")
    if mode == WITHOUT_REPLACEMENT:
        it = itertools.combinations(range(N), b)
    else:
        it = itertools.product(range(N), repeat=b)
    return np.fromiter(itertools.chain.from_iterable(it), dtype=np.int64, count=total * b).reshape(total, b)


def exact_estimator_variance(problem: FiniteSumProblem, x_s, x_0, b: int,
                             mode: str = WITHOUT_REPLACEMENT) -> float:
    """``E ||g_bar - g(x_s)||^2`` by averaging over every possible batch.

    Uses ``g_bar - g(x_s) = mean_I D - mean_all D`` with
    ``D_i = grad f_i(x_s) - grad f_i(x_0)``, evaluated in chunks.
    """
    batches = enumerate_batches(problem.N, b, mode)
    all_idx = np.arange(problem.N)
    D = batch_gradient_rows(problem, all_idx, x_s) - batch_gradient_rows(problem, all_idx, x_0)
    Dbar = sequential_mean(D)
    total = 0.0
    chunk = max(1, 2**20 // max(1, b * problem.d))
    for lo in range(0, len(batches), chunk):
        E = D[batches[lo:lo + chunk]].mean(axis=1) - Dbar
        total += float(np.sum(E * E))
    return total / len(batches)
