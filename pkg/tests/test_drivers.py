import math
import warnings

import numpy as np
import pytest

from trsvr.core import CallableProblem, ConfigurationError, ContractViolation, full_gradient, evaluate_objective
from trsvr.drivers import (
    RunConfig,
    StepSizeWarning,
    run,
    run_sgd,
    run_svrg,
    run_tr_deterministic,
    run_trsvr,
)
from trsvr.problems import Dataset, make_least_squares
from trsvr.theory import estimate_constants

from conftest import small_problem


def quadratic(N=6, d=3, seed=0):
    return small_problem("least_squares", N=N, d=d, seed=seed)


def iterates(trace):
    return np.array([r.x for r in trace.records] + [trace.x_final])


def gradient_descent(problem, x0, alpha, steps):
    xs = [np.asarray(x0, float)]
    for _ in range(steps):
        xs.append(xs[-1] - alpha * full_gradient(problem, xs[-1]))
    return np.array(xs)


BASE = RunConfig(b=6, S=4, K_max=3, alpha=0.1, record_points=True, x0=np.array([1.0, -2.0, 0.5]))


class TestFullBatchReducesToGradientDescent:
    @pytest.mark.parametrize("runner", [run_trsvr, run_svrg, run_sgd, run_tr_deterministic])
    def test_matches_gd(self, runner):
        p = quadratic()
        trace = runner(p, BASE)
        np.testing.assert_allclose(iterates(trace), gradient_descent(p, BASE.x0, 0.1, 12), rtol=0, atol=1e-12)

    def test_optimizers_agree(self):
        p = quadratic()
        ref = iterates(run_trsvr(p, BASE))
        for runner in (run_svrg, run_tr_deterministic):
            np.testing.assert_allclose(iterates(runner(p, BASE)), ref, rtol=0, atol=1e-12)

    def test_tr_deterministic_equals_trsvr_full_batch_with_exact_hessian(self):
        p = quadratic()
        cfg = BASE.replace(hessian_mode="exact_hvp", alpha=0.3)
        np.testing.assert_allclose(iterates(run_tr_deterministic(p, cfg)), iterates(run_trsvr(p, cfg)),
                                   rtol=0, atol=1e-12)


class TestAccounting:
    @pytest.mark.parametrize("b,S,K", [(1, 1, 1), (2, 5, 3), (4, 3, 7)])
    def test_trsvr_evaluations(self, b, S, K):
        p = quadratic(N=9)
        trace = run_trsvr(p, RunConfig(b=b, S=S, K_max=K))
        assert trace.total_evals == K * 9 + K * S * 2 * b
        evals = trace.column("evals")
        assert np.all(np.diff(evals) >= 0)
        assert len(trace) == K * S

    def test_per_step_increments(self):
        p = quadratic(N=9)
        trace = run_svrg(p, RunConfig(b=2, S=3, K_max=2))
        assert trace.column("evals").tolist() == [13, 17, 21, 34, 38, 42]

    def test_sgd_counts_batch(self):
        trace = run_sgd(quadratic(N=9), RunConfig(b=3, S=2, K_max=2))
        assert trace.total_evals == 12

    def test_diagnostics_do_not_count(self):
        p = quadratic(N=9)
        a = run_trsvr(p, RunConfig(b=2, S=3, K_max=2, diag_every=1))
        b = run_trsvr(p, RunConfig(b=2, S=3, K_max=2, diag_every=4))
        assert a.total_evals == b.total_evals
        assert math.isnan(b.records[1].f) and not math.isnan(b.records[4].f)
        np.testing.assert_array_equal(a.x_final, b.x_final)


class TestReproducibility:
    @pytest.mark.parametrize("optimizer", ["trsvr", "sgd", "svrg", "tr_deterministic"])
    def test_bitwise_identical(self, optimizer):
        p = small_problem("logistic", N=20, d=4, seed=1)
        cfg = RunConfig(optimizer=optimizer, b=3, S=5, K_max=4, seed=42, alpha=0.5, record_points=True)
        a, b = run(p, cfg), run(p, cfg)
        assert len(a) == len(b)
        for ra, rb in zip(a.records, b.records):
            for name in ("f", "grad_norm", "vr_grad_norm", "radius", "step_norm", "model_dec", "actual_dec"):
                va, vb = getattr(ra, name), getattr(rb, name)
                assert va == vb or (math.isnan(va) and math.isnan(vb))
            np.testing.assert_array_equal(ra.x, rb.x)

    def test_seed_changes_trace(self):
        p = small_problem("logistic", N=20, d=4, seed=1)
        a = run_trsvr(p, RunConfig(b=3, S=5, K_max=2, seed=1))
        b = run_trsvr(p, RunConfig(b=3, S=5, K_max=2, seed=2))
        assert not np.array_equal(a.x_final, b.x_final)


def test_sgd_single_step_hand_value():
    # f_1(x) = x1^2 + 0 * x2 has gradient (2, 0) at (1, 0)
    p = CallableProblem(1, 2, value=lambda i, x: float(x[0] ** 2), gradient=lambda i, x: np.array([2 * x[0], 0.0]))
    trace = run_sgd(p, RunConfig(b=1, S=1, K_max=1, alpha=0.1, x0=np.array([1.0, 0.0])))
    np.testing.assert_allclose(trace.x_final, [0.8, 0.0])


def test_svrg_first_step_uses_full_gradient():
    p = quadratic(N=8)
    x0 = np.array([0.5, 0.5, -1.0])
    trace = run_svrg(p, RunConfig(b=2, S=3, K_max=1, alpha=0.2, x0=x0, record_points=True))
    np.testing.assert_allclose(trace.records[1].x, x0 - 0.2 * full_gradient(p, x0), rtol=0, atol=1e-15)


class TestZeroGradient:
    def problem(self):
        return make_least_squares(Dataset.from_dense(np.eye(2), [1.0, 1.0]))

    @pytest.mark.parametrize("optimizer", ["trsvr", "tr_deterministic", "svrg", "sgd"])
    def test_no_movement(self, optimizer):
        x0 = np.ones(2)
        trace = run(self.problem(), RunConfig(optimizer=optimizer, b=1, S=3, K_max=2, x0=x0))
        np.testing.assert_array_equal(trace.x_final, x0)
        assert all(r.step_norm == 0.0 for r in trace.records)

    def test_grad_tol_stops(self):
        trace = run_trsvr(self.problem(), RunConfig(b=1, S=3, K_max=5, x0=np.ones(2), grad_tol=1e-12))
        assert trace.stop_reason == "grad_tol" and len(trace) == 0


def test_tr_deterministic_strict_decrease_on_convex_quadratic():
    p = quadratic(N=10, d=4, seed=3)
    c = estimate_constants(p, [np.zeros(4), np.ones(4)], K_H=1.0)
    alpha = c.step_size_limit
    trace = run_tr_deterministic(p, RunConfig(S=10, K_max=5, alpha=alpha, x0=np.full(4, 3.0)))
    f = np.append(trace.column("f"), evaluate_objective(p, trace.x_final))
    assert np.all(np.diff(f) < 0)


def test_budget_stop():
    p = quadratic(N=9)
    trace = run_trsvr(p, RunConfig(b=2, S=5, K_max=10, max_evals=50))
    assert trace.stop_reason == "budget"
    assert trace.total_evals <= 50
    assert trace.total_evals == 9 + 5 * 4 + 9 + 3 * 4


class TestStrictMode:
    def test_passes_with_admissible_alpha(self):
        p = small_problem("logistic", N=20, d=4, seed=2)
        c = estimate_constants(p, [np.zeros(4), np.ones(4)], K_H=1.0)
        trace = run_trsvr(p, RunConfig(b=2, S=5, K_max=4, alpha=c.step_size_limit, strict=True), constants=c)
        assert all(r.cauchy_ok for r in trace.records)
        assert all(r.one_step_ok for r in trace.records)

    def test_wrong_constants_abort(self):
        p = quadratic(N=10, d=3)
        c = estimate_constants(p, [np.zeros(3), np.ones(3)], K_H=1.0)
        # a badly underestimated gradient Lipschitz constant breaks the one-step inequality
        fake = c.replace(L_grad=-100.0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", StepSizeWarning)
            with pytest.raises(ContractViolation, match=r"\(k=0, s=0\)"):
                run_trsvr(p, RunConfig(b=2, S=3, K_max=1, alpha=0.1, strict=True, x0=np.ones(3)), constants=fake)

    def test_step_size_warning(self):
        p = quadratic(N=10, d=3)
        c = estimate_constants(p, [np.zeros(3), np.ones(3)], K_H=1.0)
        with pytest.warns(StepSizeWarning):
            run_trsvr(p, RunConfig(b=2, S=1, K_max=1, alpha=10 * c.step_size_limit), constants=c)


class TestValidation:
    @pytest.mark.parametrize("changes,key", [
        ({"b": 0}, "b"), ({"b": 11}, "b"), ({"S": 0}, "S"), ({"alpha": 0.0}, "alpha"),
        ({"optimizer": "adam"}, "optimizer"), ({"sampling": "stratified"}, "sampling"),
        ({"radius_policy": "clipped", "eta1": 0.1, "eta2": 1.0}, "eta1"),
        ({"hessian_mode": "newton"}, "hessian_mode"), ({"x0": np.zeros(2)}, "x0"),
    ])
    def test_bad_config(self, changes, key):
        with pytest.raises(ConfigurationError) as err:
            run(quadratic(N=10), RunConfig(**changes))
        assert err.value.key == key

    def test_with_replacement_sampling(self):
        trace = run_trsvr(quadratic(N=4), RunConfig(b=4, S=1, K_max=1, sampling="with_replacement"))
        assert len(trace) == 1


def test_lbfgs_and_clipped_run():
    p = small_problem("robust_nonconvex", N=15, d=4, seed=5)
    cfg = RunConfig(b=3, S=5, K_max=4, radius_policy="clipped", hessian_mode="lbfgs(3)", alpha=0.5)
    trace = run_trsvr(p, cfg)
    assert len(trace) == 20
    assert all(r.step_norm <= r.radius + 1e-12 for r in trace.records)
    assert all(r.cauchy_ok for r in trace.records if r.radius > 0)
