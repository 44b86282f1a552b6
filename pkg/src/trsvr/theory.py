"""Convergence constants, the Lyapunov schedule and empirical checks of the decrease lemmas.

The schedule runs backwards from ``lambda_S = 0``::

    lambda_s = (L_grad + 2 K_H) alpha^2 L^2 / (2 b)
               + lambda_{s+1} (1 + alpha z + (alpha^2 + alpha / z) L^2 / b)
    Lambda_s = alpha / 4 - lambda_{s+1} (1 + 1 / (alpha z)) alpha^2

and the averaged squared gradient norm over ``(K + 1) S`` inner steps is
bounded by ``(f(x_0) - f_inf) / ((K + 1) S Lambda_min)``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import bounds
from .bounds import expected_decrease_bound, one_step_bound, step_size_limit, step_size_ok  # noqa: F401
from .core import ConfigurationError, FiniteSumProblem, InputError, IterateState, RandomSource, evaluate_objective, full_gradient
from .drivers import RunConfig, Trace, replay_trsvr_step
from .estimators import (
    WITHOUT_REPLACEMENT,
    BatchSampler,
    count_batches,
    estimator_variance,
    exact_estimator_variance,
    MAX_ENUMERATION,
    sample_batch,
)
from .problems import LeastSquaresProblem, LinearModelProblem, LogisticProblem, RobustNonconvexProblem
from .tr_solver import spectral_norm

EMPIRICAL_SAFETY = 1.1
Z_GRID = tuple(float(z) for z in np.logspace(-2, 2, 41))


class BoundInvalid(ValueError):
    """The bound is vacuous because ``Lambda_min <= 0``."""


@dataclass
class TheoryConstants:
    L_grad: float
    L_H: float
    K_H: float
    L: float
    sigma_g: float = 0.0
    f_inf: float = 0.0
    alpha: float = 0.1
    z: float = 1.0
    b: int = 1
    S: int = 1
    empirical: bool = False

    def replace(self, **changes) -> "TheoryConstants":
        return dataclasses.replace(self, **changes)

    @property
    def step_size_ok(self) -> bool:
        return bounds.step_size_ok(self.alpha, self.L_grad, self.K_H)

    @property
    def step_size_limit(self) -> float:
        return bounds.step_size_limit(self.L_grad, self.K_H)


@dataclass
class LyapunovSchedule:
    lam: np.ndarray
    Lam: np.ndarray
    Lam_min: float

    @property
    def valid(self) -> bool:
        return self.Lam_min > 0


def _gram_norm(A: np.ndarray) -> float:
    """Largest eigenvalue of ``A^T A / N``."""
    N = A.shape[0]
    return spectral_norm(lambda v: A.T @ (A @ v) / N, A.shape[1], iters=max(50, A.shape[1]))


def _empirical_lipschitz(problem: FiniteSumProblem, points: Sequence[np.ndarray]):
    L_grad = L = 0.0
    grads = [full_gradient(problem, p) for p in points]
    comps = [problem.batch_gradients(np.arange(problem.N), p) for p in points]
    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            dist = float(np.linalg.norm(points[i] - points[j]))
            if dist == 0:
                continue
            L_grad = max(L_grad, float(np.linalg.norm(grads[i] - grads[j])) / dist)
            L = max(L, float(np.max(np.linalg.norm(comps[i] - comps[j], axis=1))) / dist)
    return EMPIRICAL_SAFETY * L_grad, EMPIRICAL_SAFETY * L


def _sigma_g(problem: FiniteSumProblem, points, b: int) -> float:
    """Largest standard deviation of a size-``b`` mini-batch gradient over ``points``."""
    N = problem.N
    worst = 0.0
    for p in points:
        G = problem.batch_gradients(np.arange(N), p)
        spread = float(np.mean(np.sum((G - G.mean(axis=0)) ** 2, axis=1)))
        fpc = (N - b) / (N - 1) if N > 1 else 0.0
        worst = max(worst, spread * fpc / b)
    return math.sqrt(worst)


def least_squares_minimum(problem: LeastSquaresProblem) -> float:
    A, y, N = problem.A, problem.y, problem.N
    M = A.T @ A / N + problem.reg * np.eye(problem.d)
    x_star = np.linalg.lstsq(M, A.T @ y / N, rcond=None)[0]
    return evaluate_objective(problem, x_star)


def estimate_constants(problem: FiniteSumProblem, sample_points: Sequence[np.ndarray], *,
                       K_H: Optional[float] = None, alpha: float = 0.1, z: float = 1.0,
                       b: int = 1, S: int = 1) -> TheoryConstants:
    """Constants for ``problem``; closed form for the built-in losses.

    * least squares: ``L_grad = L_H = lambda_max(A^T A / N) + reg``,
      ``L = max ||a_i||^2 + reg``, ``f_inf`` the exact minimum.
    * logistic: both quadratic bounds divided by 4, ``f_inf = 0``.
    * robust loss: the loss curvature lies in ``[-1/2, 2]``, giving
      ``2 lambda_max + reg`` and ``2 max ||a_i||^2 + reg``, ``f_inf = 0``.

    Anything else falls back to sampled Lipschitz ratios inflated by 10 %
    and is flagged ``empirical``. ``K_H`` defaults to ``L_H``.
    """
    points = [problem.check_point(p) for p in sample_points]
    if len(points) < 2:
        raise InputError("need at least two sample points")
    empirical = False
    if isinstance(problem, LinearModelProblem):
        lam_max = _gram_norm(problem.A)
        row_max = float(np.max(problem.row_sq_norms))
        reg = problem.reg
        if isinstance(problem, LeastSquaresProblem):
            L_grad, L, f_inf = lam_max + reg, row_max + reg, least_squares_minimum(problem)
        elif isinstance(problem, LogisticProblem):
            L_grad, L, f_inf = lam_max / 4 + reg, row_max / 4 + reg, 0.0
        elif isinstance(problem, RobustNonconvexProblem):
            L_grad, L, f_inf = 2 * lam_max + reg, 2 * row_max + reg, 0.0
        else:
            L_grad, L = _empirical_lipschitz(problem, points)
            f_inf = min(evaluate_objective(problem, p) for p in points)
            empirical = True
    else:
        L_grad, L = _empirical_lipschitz(problem, points)
        f_inf = min(evaluate_objective(problem, p) for p in points)
        empirical = True
    L_H = L_grad
    return TheoryConstants(
        L_grad=L_grad, L_H=L_H, K_H=L_H if K_H is None else K_H, L=L,
        sigma_g=_sigma_g(problem, points, b), f_inf=f_inf,
        alpha=alpha, z=z, b=b, S=S, empirical=empirical,
    )


def lyapunov_schedule(c: TheoryConstants) -> LyapunovSchedule:
    if not (c.alpha > 0 and c.z > 0):
        raise InputError("alpha and z must be positive")
    if c.S < 1 or c.b < 1:
        raise InputError("S and b must be >= 1")
    a, z, S = c.alpha, c.z, c.S
    Lb = c.L**2 / c.b
    base = 0.5 * (c.L_grad + 2 * c.K_H) * a**2 * Lb
    growth = 1 + a * z + (a**2 + a / z) * Lb
    shrink = (1 + 1 / (a * z)) * a**2
    lam = np.zeros(S + 1)
    Lam = np.zeros(S)
    for s in range(S - 1, -1, -1):
        lam[s] = base + lam[s + 1] * growth
        Lam[s] = 0.25 * a - lam[s + 1] * shrink
    return LyapunovSchedule(lam, Lam, float(Lam.min()))


def best_z(c: TheoryConstants, grid: Sequence[float] = Z_GRID) -> tuple[float, LyapunovSchedule]:
    """The ``z`` on ``grid`` maximising ``Lambda_min`` (first one on ties)."""
    best = None
    for z in grid:
        sched = lyapunov_schedule(c.replace(z=float(z)))
        if best is None or sched.Lam_min > best[1].Lam_min:
            best = (float(z), sched)
    return best


def convergence_bound(f0: float, f_inf: float, K: int, S: int, Lam_min: float) -> float:
    """Bound on the mean of ``||grad f||^2`` over outer loops ``0..K``."""
    if not Lam_min > 0:
        raise BoundInvalid(f"Lambda_min = {Lam_min} <= 0: bound vacuous for this configuration")
    if f0 < f_inf:
        raise InputError(f"f0 = {f0} is below f_inf = {f_inf}")
    return (f0 - f_inf) / ((K + 1) * S * Lam_min)


# -- verification reports ---------------------------------------------------

PASS, FAIL, SKIP = "PASS", "FAIL", "SKIP"


@dataclass
class CheckResult:
    name: str
    status: str
    lhs: float = math.nan
    rhs: float = math.nan
    slack: float = 0.0
    reason: str = ""

    def line(self) -> str:
        text = f"CHECK {self.name} {self.status} lhs={self.lhs!r} rhs={self.rhs!r} slack={self.slack!r}"
        if self.reason:
            text += f' reason="{self.reason}"'
        return text


@dataclass
class Report:
    checks: list[CheckResult] = field(default_factory=list)

    def add(self, check: CheckResult) -> CheckResult:
        self.checks.append(check)
        return check

    def extend(self, other: "Report") -> None:
        self.checks.extend(other.checks)

    @property
    def passed(self) -> bool:
        return all(c.status != FAIL for c in self.checks)

    def count(self, status: str) -> int:
        return sum(c.status == status for c in self.checks)

    def lines(self) -> list[str]:
        return [c.line() for c in self.checks]


def verify_variance_bound(problem: FiniteSumProblem, c: TheoryConstants, pairs, mode: str = "exact",
                          trials: int = 1000, seed: int = 0,
                          sampling: str = WITHOUT_REPLACEMENT) -> Report:
    """Check ``E||g_bar - g(x_s)||^2 <= (L^2 / b) ||x_s - x_0||^2`` per pair.

    ``mode="exact"`` enumerates all batches; ``mode="monte_carlo"`` passes
    when the estimate is within three standard errors of the bound.
    """
    if mode not in ("exact", "monte_carlo"):
        raise InputError(f"unknown mode {mode!r}")
    if mode == "exact" and count_batches(problem.N, c.b, sampling) > MAX_ENUMERATION:
        raise InputError(
            f"C(N={problem.N}, b={c.b}) batches exceed {MAX_ENUMERATION}; use mode='monte_carlo'"
        )
    report = Report()
    source = RandomSource(seed, tag=1)
    for j, (x_s, x_0) in enumerate(pairs):
        x_s, x_0 = np.asarray(x_s, float), np.asarray(x_0, float)
        rhs = c.L**2 / c.b * float(np.sum((x_s - x_0) ** 2))
        if mode == "exact":
            lhs, slack = exact_estimator_variance(problem, x_s, x_0, c.b, sampling), 0.0
        else:
            lhs, se = estimator_variance(problem, x_s, x_0, c.b, trials, source.child(1 + j), sampling,
                                         return_se=True)
            slack = 3.0 * se
        report.add(CheckResult(f"variance[{j}]", PASS if lhs <= rhs + slack else FAIL, lhs, rhs, slack))
    return report


def verify_one_step(trace: Trace, c: TheoryConstants, slack: float = 1e-9) -> Report:
    """Pathwise one-step decrease inequality on every recorded trust-region step."""
    report = Report()
    for r in trace.records:
        name = f"one_step[k={r.k},s={r.s}]"
        if math.isnan(r.actual_dec) or math.isnan(r.grad_error_norm):
            report.add(CheckResult(name, SKIP, reason="no diagnostics at this step"))
            continue
        H = 0.0 if math.isnan(r.hessian_norm) else r.hessian_norm
        rhs = one_step_bound(r.vr_grad_norm, r.grad_error_norm, r.radius, H, c.L_grad)
        report.add(CheckResult(name, PASS if r.actual_dec <= rhs + slack else FAIL, r.actual_dec, rhs, slack))
    return report


def expected_decrease_replay(problem: FiniteSumProblem, config: RunConfig, c: TheoryConstants,
                             x, anchor, replays: int = 1000, seed: int = 0, k: int = 0, s: int = 0):
    """Monte-Carlo test of the expected-decrease inequality from one state.

    Replays ``replays`` independent batches of one TR-SVR step from
    ``(x, anchor)``. Returns ``(lhs, rhs, slack)`` where ``lhs`` is the mean
    decrease, ``rhs`` the bound evaluated with the replayed mean squared
    gradient error, and ``slack`` three standard errors of their difference.
    """
    state = IterateState.at_anchor(problem, k, anchor)
    state.x = np.asarray(x, float).copy()
    state.s = s
    g = full_gradient(problem, state.x)
    f_x = evaluate_objective(problem, state.x)
    sampler = BatchSampler(problem.N, config.b, RandomSource(seed, tag=2), config.sampling)
    dec = np.empty(replays)
    err = np.empty(replays)
    for t in range(replays):
        out = replay_trsvr_step(problem, config, state, sample_batch(sampler, t, 0))
        dec[t] = evaluate_objective(problem, state.x + out.direction) - f_x
        e = out.estimate.value - g
        err[t] = e @ e
    gsq = float(g @ g)
    lhs = float(dec.mean())
    rhs = expected_decrease_bound(c.alpha, gsq, float(err.mean()), c.L_grad, c.K_H)
    coef = 0.5 * (c.L_grad + 2 * c.K_H) * c.alpha**2
    diff = dec - coef * err
    se = float(diff.std(ddof=1) / math.sqrt(replays)) if replays > 1 else 0.0
    return lhs, rhs, 3.0 * se


def verify_decrease_lemmas(trace: Trace, problem: FiniteSumProblem, c: TheoryConstants,
                           n_states: int = 10, replays: int = 1000, seed: int = 0) -> Report:
    """Pathwise one-step checks on every step, then replayed expected-decrease checks.

    The trace must come from the proportional radius policy. The replay
    checks are skipped when ``alpha`` violates the step-size hypothesis or
    the trace carries no recorded points.
    """
    cfg = trace.config
    if cfg.radius_policy != "proportional":
        raise ConfigurationError(
            "decrease lemmas assume the proportional radius rule; rerun with radius_policy='proportional'",
            key="radius_policy",
        )
    report = verify_one_step(trace, c)
    if not bounds.step_size_ok(cfg.alpha, c.L_grad, c.K_H):
        report.add(CheckResult("expected_decrease", SKIP, cfg.alpha, c.step_size_limit,
                               reason="alpha exceeds 1/(2(L_grad + 2 K_H))"))
        return report
    if cfg.lagged_radius or cfg.hessian.kind == "lbfgs":
        report.add(CheckResult("expected_decrease", SKIP,
                               reason="replay needs current-radius timing and a memoryless Hessian model"))
        return report
    recs = [r for r in trace.records if r.x is not None]
    if not recs:
        report.add(CheckResult("expected_decrease", SKIP, reason="trace has no recorded points"))
        return report
    picks = np.unique(np.linspace(0, len(recs) - 1, min(n_states, len(recs))).round().astype(int))
    cc = c.replace(alpha=cfg.alpha)
    for j in picks:
        r = recs[j]
        lhs, rhs, slack = expected_decrease_replay(problem, cfg, cc, r.x, r.anchor, replays,
                                                   seed=seed + int(j), k=r.k, s=r.s)
        status = PASS if lhs <= rhs + slack + 1e-12 else FAIL
        report.add(CheckResult(f"expected_decrease[k={r.k},s={r.s}]", status, lhs, rhs, slack))
    return report


def mean_squared_grad(trace: Trace) -> float:
    """``(1 / (K + 1) S) * sum ||g(x_{k,s})||^2`` over the trace's records."""
    g = trace.column("grad_norm")
    if np.any(np.isnan(g)):
        raise InputError("trace lacks true-gradient diagnostics at some steps (set diag_every=1)")
    return float(np.mean(g**2))


def verify_theorem_bound(traces: Sequence[Trace], c: TheoryConstants,
                         schedule: Optional[LyapunovSchedule] = None) -> Report:
    """Compare the across-seed average of the mean squared gradient norm with the bound.

    Passes when ``average <= bound * (1 + 3 * relative standard error)``.
    """
    report = Report()
    schedule = lyapunov_schedule(c) if schedule is None else schedule
    if not schedule.valid:
        report.add(CheckResult("theorem", SKIP, rhs=schedule.Lam_min, reason="bound vacuous"))
        return report
    per_seed = np.array([mean_squared_grad(t) for t in traces])
    f0 = float(np.mean([t.f0 for t in traces]))
    K = traces[0].outer_loops - 1
    S = traces[0].config.S
    bound = convergence_bound(f0, c.f_inf, K, S, schedule.Lam_min)
    avg = float(per_seed.mean())
    rel_se = float(per_seed.std(ddof=1) / math.sqrt(len(per_seed)) / avg) if len(per_seed) > 1 and avg > 0 else 0.0
    slack = bound * 3.0 * rel_se
    report.add(CheckResult(f"theorem[K={K}]", PASS if avg <= bound + slack else FAIL, avg, bound, slack))
    return report
