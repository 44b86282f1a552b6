"""TR-SVR two-loop driver and the SGD, SVRG and deterministic trust-region baselines.

Every driver emits one :class:`IterationRecord` per inner step into a
:class:`Trace`. Component-gradient evaluations are charged as ``N`` per
anchor full gradient and ``2b`` per variance-reduced step (``b`` for SGD,
``N`` for the deterministic trust-region control); diagnostic evaluations
of ``f`` and the true gradient are not charged.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import bounds
from .core import ConfigurationError, ContractViolation, FiniteSumProblem, IterateState, RandomSource, evaluate_objective, full_gradient
from .estimators import (
    SAMPLING_MODES,
    BatchSampler,
    GradientEstimate,
    full_estimate,
    minibatch_gradient,
    sample_batch,
    variance_reduced_gradient,
)
from .tr_solver import (
    HessianMode,
    LBFGSMemory,
    RadiusPolicy,
    Step,
    TrustRegionModel,
    build_model,
    solve_subproblem,
    update_radius,
)

log = logging.getLogger(__name__)

OPTIMIZERS = ("trsvr", "sgd", "svrg", "tr_deterministic")


class StepSizeWarning(UserWarning):
    """alpha exceeds the limit under which the expected-decrease bound is claimed."""


@dataclass
class RunConfig:
    optimizer: str = "trsvr"
    b: int = 1
    S: int = 10
    K_max: int = 10
    alpha: float = 0.1
    eta1: float = 10.0
    eta2: float = 0.1
    delta0: float = 1.0
    # use delta0 for the very first step, then the radius from the previous
    # step's gradient estimate (literal listing order) instead of the current one
    lagged_radius: bool = False
    radius_policy: str = "proportional"
    hessian_mode: str = "identity_scaled"
    hessian_scale: float = 1.0
    hessian_cap: Optional[float] = None
    subproblem: str = "steihaug"
    cg_tol: float = 1e-8
    cg_max_iter: Optional[int] = None
    sampling: str = "without_replacement"
    seed: int = 0
    grad_tol: Optional[float] = None
    max_evals: Optional[int] = None
    diag_every: int = 1
    strict: bool = False
    record_points: bool = False
    x0: Optional[np.ndarray] = None

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @property
    def policy(self) -> RadiusPolicy:
        return RadiusPolicy(self.radius_policy, self.alpha, self.eta1, self.eta2)

    @property
    def hessian(self) -> HessianMode:
        return HessianMode.parse(self.hessian_mode, self.hessian_scale)

    def validate(self, problem: FiniteSumProblem) -> None:
        def bad(key, msg):
            raise ConfigurationError(f"{key}: {msg}", key=key)

        if self.optimizer not in OPTIMIZERS:
            bad("optimizer", f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        if not 1 <= self.b <= problem.N:
            bad("b", f"batch size {self.b} must lie in [1, N={problem.N}]")
        if self.S < 1:
            bad("S", f"inner iterations must be >= 1, got {self.S}")
        if self.K_max < 0:
            bad("K_max", f"outer iterations must be >= 0, got {self.K_max}")
        if not self.alpha > 0:
            bad("alpha", f"must be positive, got {self.alpha}")
        if not self.delta0 > 0:
            bad("delta0", f"must be positive, got {self.delta0}")
        if self.sampling not in SAMPLING_MODES:
            bad("sampling", f"unknown sampling mode {self.sampling!r}")
        if self.subproblem not in ("steihaug", "cauchy"):
            bad("subproblem", f"unknown solver {self.subproblem!r}")
        if self.diag_every < 1:
            bad("diag_every", "must be >= 1")
        if self.hessian_cap is not None and not self.hessian_cap > 0:
            bad("hessian_cap", "must be positive")
        try:
            self.policy
        except ConfigurationError as exc:
            key = "eta1" if self.radius_policy in ("proportional", "clipped") else "radius_policy"
            bad(key, str(exc))
        try:
            mode = self.hessian
        except ConfigurationError as exc:
            bad("hessian_mode", str(exc))
        if mode.kind == "exact_hvp" and not problem.has_hvp:
            bad("hessian_mode", f"exact_hvp needs Hessian-vector products, which {problem.name!r} lacks")
        if self.x0 is not None and np.shape(self.x0) != (problem.d,):
            bad("x0", f"expected {problem.d} entries, got shape {np.shape(self.x0)}")


@dataclass
class IterationRecord:
    k: int
    s: int
    f: float
    grad_norm: float
    vr_grad_norm: float
    radius: float
    step_norm: float
    model_dec: float
    actual_dec: float
    evals: int
    grad_error_norm: float = math.nan
    hessian_norm: float = math.nan
    cauchy_ok: Optional[bool] = None
    one_step_ok: Optional[bool] = None
    rho: float = math.nan
    x: Optional[np.ndarray] = field(default=None, repr=False)
    anchor: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass
class Trace:
    optimizer: str
    config: RunConfig
    problem_name: str
    f0: float
    x_final: np.ndarray
    records: list[IterationRecord] = field(default_factory=list)
    outer_loops: int = 0
    stop_reason: str = "K_max"

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    @property
    def total_evals(self) -> int:
        return self.records[-1].evals if self.records else 0


def _step_cost(optimizer: str, problem: FiniteSumProblem, b: int) -> int:
    return {"trsvr": 2 * b, "svrg": 2 * b, "sgd": b, "tr_deterministic": problem.N}[optimizer]


@dataclass
class StepOutcome:
    estimate: GradientEstimate
    radius: float
    step: Optional[Step]
    direction: np.ndarray
    model: Optional[TrustRegionModel] = None
    certified: Optional[bool] = None


def trust_region_step(problem: FiniteSumProblem, config: RunConfig, state: IterateState,
                      estimate: GradientEstimate, radius: float,
                      memory: Optional[LBFGSMemory] = None) -> StepOutcome:
    """Model, subproblem and certificate for one trust-region inner step.

    A zero radius (zero gradient estimate) yields the zero step.
    """
    if radius == 0.0:
        return StepOutcome(estimate, 0.0, None, np.zeros(problem.d))
    state.radius = radius
    model = build_model(problem, state, estimate, config.hessian, memory, config.hessian_cap)
    step, certified = solve_subproblem(model, config.subproblem, config.cg_tol, config.cg_max_iter)
    return StepOutcome(estimate, radius, step, step.direction, model, certified)


def replay_trsvr_step(problem: FiniteSumProblem, config: RunConfig, state: IterateState, batch) -> StepOutcome:
    """One TR-SVR inner step from ``state`` with a given batch (current-radius timing)."""
    estimate = variance_reduced_gradient(problem, state, batch)
    radius = update_radius(config.policy, estimate.norm)
    return trust_region_step(problem, config, state, estimate, radius)


def _run(problem: FiniteSumProblem, config: RunConfig, constants=None) -> Trace:
    config.validate(problem)
    opt = config.optimizer
    policy = config.policy
    uses_anchor = opt in ("trsvr", "svrg")
    is_tr = opt in ("trsvr", "tr_deterministic")
    mode = config.hessian
    memory = LBFGSMemory(mode.memory) if (is_tr and mode.kind == "lbfgs") else None
    sampler = BatchSampler(problem.N, config.b, RandomSource(config.seed), config.sampling)

    if constants is not None and opt == "trsvr" and policy.mode == "proportional":
        if not bounds.step_size_ok(config.alpha, constants.L_grad, constants.K_H):
            warnings.warn(
                f"alpha = {config.alpha} exceeds 1/(2(L_grad + 2 K_H)) = "
                f"{bounds.step_size_limit(constants.L_grad, constants.K_H):.6g}",
                StepSizeWarning,
                stacklevel=3,
            )

    x = np.zeros(problem.d) if config.x0 is None else problem.check_point(config.x0).copy()
    f_cur = evaluate_objective(problem, x)
    trace = Trace(opt, config, problem.name, f_cur, x.copy())
    evals = 0
    radius = config.delta0
    cost = _step_cost(opt, problem, config.b)
    prev_point = prev_grad = None
    step_index = 0

    for k in range(config.K_max):
        if uses_anchor:
            if config.max_evals is not None and evals + problem.N + cost > config.max_evals:
                trace.stop_reason = "budget"
                break
            state = IterateState.at_anchor(problem, k, x, radius)
            evals += problem.N
            if config.grad_tol is not None and np.linalg.norm(state.anchor_full_gradient) <= config.grad_tol:
                trace.stop_reason = "grad_tol"
                break
        else:
            state = IterateState(k, 0, x, x.copy(), np.zeros(problem.d), radius)
        trace.outer_loops = k + 1
        stopped = False

        for s in range(config.S):
            if config.max_evals is not None and evals + cost > config.max_evals:
                trace.stop_reason, stopped = "budget", True
                break
            state.s = s
            diag = step_index % config.diag_every == 0
            g_true = None
            if diag or opt == "tr_deterministic":
                g_true = full_gradient(problem, state.x)
                if f_cur is None:
                    f_cur = evaluate_objective(problem, state.x)
            if (not uses_anchor and config.grad_tol is not None and g_true is not None
                    and np.linalg.norm(g_true) <= config.grad_tol):
                trace.stop_reason, stopped = "grad_tol", True
                break

            if opt in ("trsvr", "svrg"):
                estimate = variance_reduced_gradient(problem, state, sample_batch(sampler, k, s))
            elif opt == "sgd":
                estimate = minibatch_gradient(problem, state.x, sample_batch(sampler, k, s))
            else:
                estimate = GradientEstimate(g_true, "full", point=state.x.copy())
            evals += cost

            if is_tr:
                if memory is not None and prev_point is not None:
                    memory.update(state.x - prev_point, estimate.value - prev_grad)
                if config.lagged_radius:
                    step_radius = radius
                    radius_next = update_radius(policy, estimate.norm)
                else:
                    step_radius = update_radius(policy, estimate.norm)
                    radius_next = step_radius
                outcome = trust_region_step(problem, config, state, estimate, step_radius, memory)
                if radius_next > 0:
                    radius = radius_next
            else:
                direction = -config.alpha * estimate.value
                outcome = StepOutcome(estimate, config.alpha * estimate.norm, None, direction)

            if outcome.certified is False:
                msg = f"Cauchy decrease certificate failed at (k={k}, s={s})"
                if config.strict:
                    raise ContractViolation(msg)
                log.warning(msg)

            x_next = state.x + outcome.direction
            f_next = evaluate_objective(problem, x_next) if diag else None
            rec = IterationRecord(
                k=k, s=s,
                f=f_cur if diag else math.nan,
                grad_norm=float(np.linalg.norm(g_true)) if diag else math.nan,
                vr_grad_norm=estimate.norm,
                radius=outcome.radius,
                step_norm=float(np.linalg.norm(outcome.direction)),
                model_dec=outcome.step.model_decrease if outcome.step else (0.0 if is_tr else math.nan),
                actual_dec=(f_next - f_cur) if diag else math.nan,
                evals=evals,
                grad_error_norm=float(np.linalg.norm(g_true - estimate.value)) if diag else math.nan,
                hessian_norm=outcome.model.norm_bound if outcome.model else math.nan,
                cauchy_ok=outcome.certified if is_tr else None,
            )
            if outcome.step is not None and outcome.step.model_decrease != 0 and diag:
                rec.rho = rec.actual_dec / outcome.step.model_decrease
            if config.record_points:
                rec.x, rec.anchor = state.x.copy(), state.anchor.copy()
            if is_tr and diag and constants is not None:
                rhs = bounds.one_step_bound(rec.vr_grad_norm, rec.grad_error_norm, rec.radius,
                                            0.0 if outcome.model is None else rec.hessian_norm,
                                            constants.L_grad)
                rec.one_step_ok = rec.actual_dec <= rhs + 1e-9
                if config.strict and not rec.one_step_ok:
                    raise ContractViolation(
                        f"one-step decrease inequality failed at (k={k}, s={s}): "
                        f"{rec.actual_dec!r} > {rhs!r}"
                    )
            trace.records.append(rec)

            if is_tr:
                prev_point, prev_grad = state.x.copy(), estimate.value.copy()
            state.x = x_next
            f_cur = f_next
            step_index += 1

        x = state.x.copy()
        if stopped:
            break

    trace.x_final = x
    return trace


def run_trsvr(problem: FiniteSumProblem, config: RunConfig, constants=None) -> Trace:
    """Trust-region steps on variance-reduced gradients, anchored every ``S`` steps.

    ``constants`` (a ``TheoryConstants``) enables the step-size warning and
    the per-step one-step decrease check; with ``config.strict`` a failed
    check raises :class:`ContractViolation`.
    """
    return _run(problem, config.replace(optimizer="trsvr"), constants)


def run_sgd(problem: FiniteSumProblem, config: RunConfig) -> Trace:
    return _run(problem, config.replace(optimizer="sgd"))


def run_svrg(problem: FiniteSumProblem, config: RunConfig) -> Trace:
    return _run(problem, config.replace(optimizer="svrg"))


def run_tr_deterministic(problem: FiniteSumProblem, config: RunConfig, constants=None) -> Trace:
    """TR-SVR with the exact gradient in place of the estimate; a noise-free control."""
    return _run(problem, config.replace(optimizer="tr_deterministic"), constants)


def run(problem: FiniteSumProblem, config: RunConfig, constants=None) -> Trace:
    return _run(problem, config, constants)
