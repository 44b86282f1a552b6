"""Quadratic trust-region models, subproblem solvers and radius rules.

The model is ``m(p) = g @ p + 0.5 * p @ H p`` on the ball ``||p|| <= radius``;
``H`` is only ever touched through matrix-vector products.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import ConfigurationError, ContractViolation, FiniteSumProblem, InputError, IterateState, NumericFailure
from .estimators import FULL, VARIANCE_REDUCED, GradientEstimate

HESSIAN_KINDS = ("exact_hvp", "identity_scaled", "diagonal", "lbfgs")
POWER_ITERATIONS = 50


@dataclass(frozen=True)
class HessianMode:
    kind: str = "identity_scaled"
    scale: float = 1.0
    memory: int = 5

    def __post_init__(self):
        if self.kind not in HESSIAN_KINDS:
            raise ConfigurationError(f"unknown hessian mode {self.kind!r}; expected one of {HESSIAN_KINDS}")
        if self.kind == "lbfgs" and self.memory < 1:
            raise ConfigurationError("lbfgs memory must be >= 1")

    @classmethod
    def parse(cls, text: str, scale: float = 1.0) -> "HessianMode":
        """Accept ``identity_scaled``, ``exact_hvp``, ``diagonal``, ``lbfgs`` or ``lbfgs(m)``."""
        m = re.fullmatch(r"\s*(\w+)\s*(?:\(\s*(\d+)\s*\))?\s*", text)
        if not m:
            raise ConfigurationError(f"cannot parse hessian mode {text!r}")
        kind, mem = m.group(1), m.group(2)
        if mem is not None and kind != "lbfgs":
            raise ConfigurationError(f"only lbfgs takes a memory argument, got {text!r}")
        return cls(kind, scale, int(mem) if mem else 5)

    def __str__(self):
        return f"lbfgs({self.memory})" if self.kind == "lbfgs" else self.kind


def spectral_norm(matvec: Callable[[np.ndarray], np.ndarray], d: int, iters: int = POWER_ITERATIONS) -> float:
    """Largest ``|eigenvalue|`` of a symmetric operator.

    When ``d <= iters`` the operator is materialised with ``d`` products and
    the norm is exact; otherwise ``iters`` steps of power iteration are run
    from a fixed start vector.
    """
    if d <= iters:
        M = np.column_stack([matvec(e) for e in np.eye(d)])
        return float(np.max(np.abs(np.linalg.eigvalsh(0.5 * (M + M.T)))))
    v = np.random.default_rng(20240917).standard_normal(d)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = matvec(v)
        est = float(np.linalg.norm(w))
        if est == 0.0:
            return 0.0
        v = w / est
    return est


class LBFGSMemory:
    """Limited-memory BFGS approximation of the Hessian itself (not its inverse).

    ``B v`` is applied matrix-free from the stored pairs with initial matrix
    ``gamma I``, ``gamma = y @ y / s @ y`` of the newest pair. Pairs failing the
    curvature test ``s @ y > eps ||s|| ||y||`` are dropped.
    """

    def __init__(self, m: int = 5, curvature_eps: float = 1e-10):
        self.m = m
        self.curvature_eps = curvature_eps
        self.pairs: list[tuple[np.ndarray, np.ndarray]] = []
        self._terms = None

    def __len__(self):
        return len(self.pairs)

    def update(self, s: np.ndarray, y: np.ndarray) -> bool:
        sy = float(s @ y)
        if not sy > self.curvature_eps * np.linalg.norm(s) * np.linalg.norm(y):
            return False
        self.pairs.append((s.copy(), y.copy()))
        if len(self.pairs) > self.m:
            self.pairs.pop(0)
        self._terms = None
        return True

    @property
    def gamma(self) -> float:
        s, y = self.pairs[-1]
        return float(y @ y) / float(s @ y)

    def _build(self):
        gamma = self.gamma
        terms = []  # (a_i, a_i @ s_i, y_i, y_i @ s_i) with a_i = B_i s_i
        for s, y in self.pairs:
            a = self._apply(s, gamma, terms)
            terms.append((a, float(a @ s), y, float(y @ s)))
        self._terms = (gamma, terms)

    @staticmethod
    def _apply(v, gamma, terms):
        out = gamma * v
        for a, as_, y, ys in terms:
            out = out - (a @ v) / as_ * a + (y @ v) / ys * y
        return out

    def matvec(self, v: np.ndarray) -> np.ndarray:
        if self._terms is None:
            self._build()
        gamma, terms = self._terms
        return self._apply(v, gamma, terms)


@dataclass
class TrustRegionModel:
    gradient: np.ndarray
    hvp: Callable[[np.ndarray], np.ndarray]
    radius: float
    norm_bound: float

    def value(self, p: np.ndarray) -> float:
        return float(self.gradient @ p + 0.5 * (p @ self.hvp(p)))

    @property
    def gradient_norm(self) -> float:
        return float(np.linalg.norm(self.gradient))

    @classmethod
    def from_matrix(cls, g, H, radius, norm_bound=None) -> "TrustRegionModel":
        g = np.asarray(g, dtype=float)
        H = np.asarray(H, dtype=float)
        if norm_bound is None:
            norm_bound = float(np.max(np.abs(np.linalg.eigvalsh(H)))) if H.size else 0.0
        return cls(g, lambda v: H @ v, float(radius), float(norm_bound))


@dataclass
class Step:
    direction: np.ndarray
    model_decrease: float
    on_boundary: bool
    truncated: bool = False
    iterations: int = 0
    solver: str = "cauchy"

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.direction))


def build_model(problem: FiniteSumProblem, state: IterateState, estimate: GradientEstimate,
                mode: HessianMode = HessianMode(), memory: Optional[LBFGSMemory] = None,
                cap: Optional[float] = None) -> TrustRegionModel:
    """Quadratic model at ``state.x`` around ``estimate``.

    The norm of ``H`` is measured with :func:`spectral_norm`; above ``cap``
    the operator is rescaled so its norm equals ``cap``.
    """
    if estimate.kind not in (VARIANCE_REDUCED, FULL):
        raise ContractViolation(f"trust-region model needs a variance-reduced or full gradient, got {estimate.kind}")
    d = problem.d
    x = state.x.copy()
    kind = mode.kind
    if kind == "lbfgs" and (memory is None or len(memory) == 0):
        kind = "identity_scaled"

    if kind == "identity_scaled":
        scale = mode.scale
        hvp = lambda v: scale * v
        norm = abs(scale)
    elif kind == "exact_hvp":
        if not problem.has_hvp:
            raise ConfigurationError(f"hessian mode exact_hvp needs Hessian-vector products, which {problem.name!r} lacks")
        hvp = lambda v: problem.hessian_vector_product(x, v)
        norm = spectral_norm(hvp, d)
    elif kind == "diagonal":
        if hasattr(problem, "hessian_diagonal"):
            diag = problem.hessian_diagonal(x)
        elif problem.has_hvp:
            diag = np.array([problem.hessian_vector_product(x, e)[j] for j, e in enumerate(np.eye(d))])
        else:
            raise ConfigurationError(f"hessian mode diagonal needs Hessian information, which {problem.name!r} lacks")
        hvp = lambda v: diag * v
        norm = float(np.max(np.abs(diag)))
    else:
        hvp = memory.matvec
        norm = spectral_norm(hvp, d)

    if cap is not None and norm > cap:
        base, factor = hvp, cap / norm
        hvp = lambda v: factor * base(v)
        norm = float(cap)
    return TrustRegionModel(estimate.value.copy(), hvp, float(state.radius), float(norm))


def _check_finite(model: TrustRegionModel):
    if not (np.all(np.isfinite(model.gradient)) and math.isfinite(model.radius) and math.isfinite(model.norm_bound)):
        raise NumericFailure("non-finite trust-region model data")


def _clip_to_ball(p: np.ndarray, radius: float) -> np.ndarray:
    n = np.linalg.norm(p)
    if n > radius:
        p = p * (radius / n)
    return p


def _zero_step(model: TrustRegionModel, solver: str) -> Step:
    return Step(np.zeros_like(model.gradient), 0.0, False, solver=solver)


def cauchy_step(model: TrustRegionModel) -> Step:
    """Minimiser of the model along ``-g`` inside the ball."""
    if not model.radius > 0:
        raise InputError(f"radius must be positive, got {model.radius}")
    _check_finite(model)
    g = model.gradient
    gnorm = model.gradient_norm
    if gnorm == 0.0:
        return _zero_step(model, "cauchy")
    curv = float(g @ model.hvp(g))
    if not math.isfinite(curv):
        raise NumericFailure("non-finite curvature along the gradient")
    t = model.radius if curv <= 0 else min(model.radius, gnorm**3 / curv)
    p = _clip_to_ball(-(t / gnorm) * g, model.radius)
    return Step(p, model.value(p), t == model.radius, solver="cauchy")


def _to_boundary(z: np.ndarray, d: np.ndarray, radius: float) -> np.ndarray:
    """``z + tau d`` with ``tau >= 0`` and ``||z + tau d|| = radius``."""
    a = float(d @ d)
    b = 2.0 * float(z @ d)
    c = float(z @ z) - radius * radius
    root = math.sqrt(max(b * b - 4.0 * a * c, 0.0))
    tau = (-b + root) / (2.0 * a) if b <= 0 else (-2.0 * c) / (b + root)
    return _clip_to_ball(z + max(tau, 0.0) * d, radius)


def steihaug_cg(model: TrustRegionModel, tol: float = 1e-8, max_iter: Optional[int] = None) -> Step:
    """Truncated conjugate gradients on the trust-region subproblem.

    Stops on a relative residual below ``tol``, on leaving the ball, or on
    non-positive curvature (the last two step to the boundary). Running out
    of iterations returns the last iterate with ``truncated=True``.
    """
    if not tol > 0:
        raise InputError("tol must be positive")
    if not model.radius > 0:
        raise InputError(f"radius must be positive, got {model.radius}")
    _check_finite(model)
    g = model.gradient
    n = g.shape[0]
    max_iter = 2 * n if max_iter is None else max_iter
    gnorm = model.gradient_norm
    if gnorm == 0.0:
        return _zero_step(model, "steihaug")

    z = np.zeros(n)
    r = g.copy()
    d = -r
    rr = float(r @ r)
    for j in range(1, max_iter + 1):
        Hd = model.hvp(d)
        dHd = float(d @ Hd)
        if not math.isfinite(dHd):
            raise NumericFailure("non-finite curvature in conjugate gradients")
        if dHd <= 0:
            p = _to_boundary(z, d, model.radius)
            return Step(p, model.value(p), True, iterations=j, solver="steihaug")
        step = rr / dHd
        z_next = z + step * d
        if np.linalg.norm(z_next) >= model.radius:
            p = _to_boundary(z, d, model.radius)
            return Step(p, model.value(p), True, iterations=j, solver="steihaug")
        z = z_next
        r = r + step * Hd
        rr_next = float(r @ r)
        if math.sqrt(rr_next) <= tol * gnorm:
            return Step(z, model.value(z), False, iterations=j, solver="steihaug")
        d = -r + (rr_next / rr) * d
        rr = rr_next
    return Step(z, model.value(z), False, truncated=True, iterations=max_iter, solver="steihaug")


def cauchy_decrease_bound(model: TrustRegionModel) -> float:
    """Right-hand side ``-||g|| radius + 0.5 ||H|| radius^2``."""
    return -model.gradient_norm * model.radius + 0.5 * model.norm_bound * model.radius**2


def check_cauchy_decrease(model: TrustRegionModel, step: Step, slack: float = 1e-10) -> bool:
    return step.model_decrease <= cauchy_decrease_bound(model) + slack


def solve_subproblem(model: TrustRegionModel, solver: str = "steihaug", tol: float = 1e-8,
                     max_iter: Optional[int] = None) -> tuple[Step, bool]:
    """Solve and certify; returns ``(step, certified)``.

    A step that fails the Cauchy decrease certificate is replaced by the
    Cauchy step. ``certified`` reports whether the returned step passes.
    """
    if solver == "cauchy":
        step = cauchy_step(model)
    elif solver == "steihaug":
        step = steihaug_cg(model, tol, max_iter)
    else:
        raise ConfigurationError(f"unknown subproblem solver {solver!r}")
    if check_cauchy_decrease(model, step):
        return step, True
    if solver != "cauchy":
        step = cauchy_step(model)
    return step, check_cauchy_decrease(model, step)


PROPORTIONAL = "proportional"
CLIPPED = "clipped"


@dataclass(frozen=True)
class RadiusPolicy:
    """Radius as a function of the gradient-estimate norm.

    ``proportional``: ``alpha * ||g||``. ``clipped``: ``eta1 * alpha * ||g||``
    below ``1/eta1``, ``alpha`` between ``1/eta1`` and ``1/eta2`` (ties
    included), ``eta2 * alpha * ||g||`` above ``1/eta2``; needs
    ``eta1 > eta2 > 0``.
    """

    mode: str = PROPORTIONAL
    alpha: float = 0.1
    eta1: float = 10.0
    eta2: float = 0.1

    def __post_init__(self):
        if self.mode not in (PROPORTIONAL, CLIPPED):
            raise ConfigurationError(f"unknown radius policy {self.mode!r}")
        if not self.alpha > 0:
            raise ConfigurationError(f"alpha must be positive, got {self.alpha}")
        if self.mode == CLIPPED and not self.eta1 > self.eta2 > 0:
            raise ConfigurationError(f"clipped policy needs eta1 > eta2 > 0, got eta1={self.eta1}, eta2={self.eta2}")


def update_radius(policy: RadiusPolicy, gnorm: float) -> float:
    if gnorm < 0 or not math.isfinite(gnorm):
        raise InputError(f"gradient norm must be finite and >= 0, got {gnorm}")
    if gnorm == 0.0:
        return 0.0
    if policy.mode == PROPORTIONAL:
        return policy.alpha * gnorm
    if gnorm < 1.0 / policy.eta1:
        return policy.eta1 * policy.alpha * gnorm
    if gnorm > 1.0 / policy.eta2:
        return policy.eta2 * policy.alpha * gnorm
    return policy.alpha
