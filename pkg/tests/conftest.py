import sys

import numpy as np
import pytest

from trsvr.problems import Dataset, make_least_squares, make_logistic, make_robust_nonconvex, synth_data


def central_difference(fun, x, h=1e-6):
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def brute_force_gradient_mean(problem, x, idx):
    """Plain Python average of component gradients, independent of the package's reductions."""
    total = np.zeros(problem.d)
    for i in idx:
        total = total + problem.component_gradient(int(i), x)
    return total / len(idx)


def small_problem(kind, N=6, d=3, seed=0, reg=0.05):
    if kind == "least_squares":
        return make_least_squares(synth_data(seed, N, d, "gaussian_ls", 0.3), reg)
    if kind == "logistic":
        return make_logistic(synth_data(seed, N, d, "separable_logistic", 0.2), reg)
    return make_robust_nonconvex(synth_data(seed, N, d, "gaussian_ls", 0.5), reg)


@pytest.fixture(params=["least_squares", "logistic", "robust_nonconvex"])
def builtin_problem(request):
    return small_problem(request.param, N=12, d=4, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results):
        terminalreporter.write_line(results[key])
