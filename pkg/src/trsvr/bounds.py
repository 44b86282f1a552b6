"""Right-hand sides of the per-step decrease inequalities.

Kept free of driver imports so strict-mode drivers and the verifiers in
``theory`` share one definition.
"""

from __future__ import annotations


def step_size_limit(L_grad: float, K_H: float) -> float:
    """Largest ``alpha`` for which the expected-decrease bound is claimed."""
    return 1.0 / (2.0 * (L_grad + 2.0 * K_H))


def step_size_ok(alpha: float, L_grad: float, K_H: float) -> bool:
    return alpha <= step_size_limit(L_grad, K_H)


def one_step_bound(vr_grad_norm: float, grad_error_norm: float, radius: float,
                   hessian_norm: float, L_grad: float) -> float:
    """Pathwise bound on ``f(x_next) - f(x)`` after a certified model step.

    ``-||g_bar|| D + ||H|| D^2 / 2 + ||g - g_bar|| D + (L_grad + ||H||) D^2 / 2``
    with ``D`` the trust-region radius.
    """
    return (
        -vr_grad_norm * radius
        + 0.5 * hessian_norm * radius**2
        + grad_error_norm * radius
        + 0.5 * (L_grad + hessian_norm) * radius**2
    )


def expected_decrease_bound(alpha: float, grad_norm_sq: float, mean_sq_error: float,
                            L_grad: float, K_H: float) -> float:
    """Bound on ``E[f(x_next)] - f(x)`` under the proportional radius rule."""
    return -0.25 * alpha * grad_norm_sq + 0.5 * (L_grad + 2.0 * K_H) * alpha**2 * mean_sq_error
