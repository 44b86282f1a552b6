import numpy as np
import pytest
from hypothesis import given, strategies as st

from trsvr.core import ConfigurationError, ContractViolation, InputError, IterateState, NumericFailure, CallableProblem
from trsvr.estimators import full_estimate, minibatch_gradient
from trsvr.problems import Dataset, make_least_squares
from trsvr.tr_solver import (
    HessianMode,
    LBFGSMemory,
    RadiusPolicy,
    Step,
    TrustRegionModel,
    build_model,
    cauchy_decrease_bound,
    cauchy_step,
    check_cauchy_decrease,
    solve_subproblem,
    spectral_norm,
    steihaug_cg,
    update_radius,
)

from conftest import small_problem


def random_model(rng, d=None):
    d = d or int(rng.integers(1, 21))
    M = rng.standard_normal((d, d))
    H = (M + M.T) / 2 * rng.uniform(0.01, 5)
    g = rng.standard_normal(d) * 10.0 ** rng.uniform(-3, 2)
    return TrustRegionModel.from_matrix(g, H, 10.0 ** rng.uniform(-3, 2)), H


def model_setup(problem, x, mode, **kw):
    state = IterateState.at_anchor(problem, 0, x, radius=1.0)
    return build_model(problem, state, full_estimate(problem, x), mode, **kw)


class TestCauchyStep:
    def test_linear_model_boundary(self):
        step = cauchy_step(TrustRegionModel.from_matrix([1.0, 0.0], np.zeros((2, 2)), 0.5))
        np.testing.assert_allclose(step.direction, [-0.5, 0.0])
        assert step.model_decrease == pytest.approx(-0.5)
        assert step.on_boundary

    def test_zero_gradient(self):
        step = cauchy_step(TrustRegionModel.from_matrix([0.0, 0.0], np.eye(2), 1.0))
        np.testing.assert_array_equal(step.direction, [0.0, 0.0])
        assert step.model_decrease == 0.0

    def test_line_minimizer_beyond_radius(self):
        # along -g the model is -2t + t^2/2; its minimizer t = 2 exceeds the radius
        step = cauchy_step(TrustRegionModel.from_matrix([0.0, 2.0], np.eye(2), 1.0))
        np.testing.assert_allclose(step.direction, [0.0, -1.0])
        assert step.model_decrease == pytest.approx(-1.5)

    def test_interior_line_minimizer(self):
        # -2t + 2 t^2 is minimized at t = 0.5
        step = cauchy_step(TrustRegionModel.from_matrix([2.0], [[4.0]], 10.0))
        np.testing.assert_allclose(step.direction, [-0.5])
        assert not step.on_boundary

    def test_nonfinite_model(self):
        with pytest.raises(NumericFailure):
            cauchy_step(TrustRegionModel.from_matrix([np.nan], [[1.0]], 1.0))


class TestSteihaug:
    def test_interior_newton_point(self):
        step = steihaug_cg(TrustRegionModel.from_matrix([1.0, 0.0], np.eye(2), 10.0))
        np.testing.assert_allclose(step.direction, [-1.0, 0.0])
        assert step.model_decrease == pytest.approx(-0.5)
        assert not step.on_boundary

    def test_negative_curvature_goes_to_boundary(self):
        step = steihaug_cg(TrustRegionModel.from_matrix([1.0, 0.0], -np.eye(2), 1.0))
        assert step.norm == pytest.approx(1.0)
        assert step.on_boundary

    def test_zero_gradient(self):
        step = steihaug_cg(TrustRegionModel.from_matrix([0.0, 0.0], np.eye(2), 1.0))
        np.testing.assert_array_equal(step.direction, [0.0, 0.0])

    def test_truncation_flag(self, rng):
        A = rng.standard_normal((10, 10))
        model = TrustRegionModel.from_matrix(rng.standard_normal(10), A @ A.T + np.eye(10), 1e6)
        step = steihaug_cg(model, max_iter=2)
        assert step.truncated and step.iterations == 2

    def test_solves_spd_system_inside_ball(self, rng):
        A = rng.standard_normal((8, 8))
        H = A @ A.T + np.eye(8)
        g = rng.standard_normal(8)
        step = steihaug_cg(TrustRegionModel.from_matrix(g, H, 1e6), tol=1e-12)
        np.testing.assert_allclose(step.direction, np.linalg.solve(H, -g), rtol=1e-8)


def test_random_models(rng):
    for _ in range(1000):
        model, H = random_model(rng)
        c = cauchy_step(model)
        s = steihaug_cg(model)
        for step in (c, s):
            assert step.norm <= model.radius + 1e-12
            assert step.model_decrease <= 0.0
            assert step.model_decrease == pytest.approx(model.value(step.direction), abs=1e-12)
        assert s.model_decrease <= c.model_decrease + 1e-12 * max(1.0, abs(c.model_decrease))
        g = model.gradient
        full_radius = -model.radius * g / np.linalg.norm(g)
        if c.on_boundary:
            assert check_cauchy_decrease(model, c)
        assert c.model_decrease <= model.value(full_radius) + 1e-12 * max(1.0, abs(c.model_decrease))
        step, certified = solve_subproblem(model)
        assert step.norm <= model.radius + 1e-12


class TestCheckCauchyDecrease:
    def test_boundary_cauchy_step(self):
        model = TrustRegionModel.from_matrix([1.0, 2.0], np.diag([1.0, -1.0]), 0.3)
        assert check_cauchy_decrease(model, cauchy_step(model))

    def test_zero_step_fails_when_bound_negative(self):
        model = TrustRegionModel.from_matrix([1.0, 0.0], np.eye(2), 0.5)
        assert cauchy_decrease_bound(model) < 0
        assert not check_cauchy_decrease(model, Step(np.zeros(2), 0.0, False))

    def test_zero_gradient_passes(self):
        model = TrustRegionModel.from_matrix([0.0, 0.0], np.eye(2), 2.0)
        assert check_cauchy_decrease(model, cauchy_step(model))
        assert check_cauchy_decrease(model, steihaug_cg(model))

    def test_solve_subproblem_falls_back(self):
        model = TrustRegionModel.from_matrix([1.0, 0.0], np.eye(2), 0.5)
        # zero CG iterations leave the zero step, which fails the certificate
        step, ok = solve_subproblem(model, "steihaug", max_iter=0)
        assert ok and step.solver == "cauchy"

    def test_unknown_solver(self):
        with pytest.raises(ConfigurationError):
            solve_subproblem(TrustRegionModel.from_matrix([1.0], [[1.0]], 1.0), "dogleg")


class TestBuildModel:
    def test_identity(self):
        p = small_problem("logistic", N=6, d=3)
        model = model_setup(p, np.zeros(3), HessianMode("identity_scaled", 1.0))
        np.testing.assert_array_equal(model.hvp(np.array([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0])
        assert model.norm_bound == 1.0

    def test_exact_hvp_single_row(self):
        p = make_least_squares(Dataset.from_dense([[1.0, 0.0]], [0.0]), reg=0.0)
        model = model_setup(p, np.zeros(2), HessianMode("exact_hvp"))
        np.testing.assert_allclose(model.hvp(np.array([3.0, 4.0])), [3.0, 0.0])
        assert model.norm_bound == pytest.approx(1.0)

    def test_exact_hvp_symmetric(self, builtin_problem, rng):
        model = model_setup(builtin_problem, rng.standard_normal(4), HessianMode("exact_hvp"))
        v, w = rng.standard_normal(4), rng.standard_normal(4)
        a, b = v @ model.hvp(w), w @ model.hvp(v)
        assert abs(a - b) <= 1e-10 * max(abs(a), 1.0)

    def test_diagonal(self, builtin_problem, rng):
        x = rng.standard_normal(4)
        model = model_setup(builtin_problem, x, HessianMode("diagonal"))
        diag = builtin_problem.hessian_diagonal(x)
        np.testing.assert_allclose(model.hvp(np.ones(4)), diag)
        assert model.norm_bound == pytest.approx(np.max(np.abs(diag)))

    def test_lbfgs_empty_history_is_identity(self):
        p = small_problem("least_squares", N=6, d=3)
        model = model_setup(p, np.ones(3), HessianMode.parse("lbfgs(3)", scale=1.0), memory=LBFGSMemory(3))
        np.testing.assert_array_equal(model.hvp(np.array([1.0, -2.0, 0.5])), [1.0, -2.0, 0.5])

    def test_cap_rescales(self):
        p = make_least_squares(Dataset.from_dense([[3.0, 0.0]], [0.0]), reg=0.0)
        model = model_setup(p, np.zeros(2), HessianMode("exact_hvp"), cap=2.0)
        assert model.norm_bound == 2.0
        np.testing.assert_allclose(model.hvp(np.array([1.0, 0.0])), [2.0, 0.0])
        assert spectral_norm(model.hvp, 2) <= 2.0 + 1e-12

    def test_exact_hvp_requires_hvp(self):
        p = CallableProblem(2, 1, value=lambda i, x: 0.0, gradient=lambda i, x: np.zeros(1))
        with pytest.raises(ConfigurationError):
            model_setup(p, np.zeros(1), HessianMode("exact_hvp"))

    def test_minibatch_estimate_refused(self):
        p = small_problem("least_squares", N=6, d=3)
        state = IterateState.at_anchor(p, 0, np.zeros(3))
        with pytest.raises(ContractViolation):
            build_model(p, state, minibatch_gradient(p, np.zeros(3), [0, 1]))

    @pytest.mark.parametrize("text,kind,memory", [("lbfgs(7)", "lbfgs", 7), ("lbfgs", "lbfgs", 5),
                                                  ("exact_hvp", "exact_hvp", 5)])
    def test_mode_parse(self, text, kind, memory):
        mode = HessianMode.parse(text)
        assert (mode.kind, mode.memory) == (kind, memory)

    @pytest.mark.parametrize("text", ["newton", "diagonal(3)", "lbfgs(0)", "lbfgs("])
    def test_mode_parse_errors(self, text):
        with pytest.raises(ConfigurationError):
            HessianMode.parse(text)


class TestLBFGS:
    def test_secant_condition(self, rng):
        A = rng.standard_normal((5, 5))
        H = A @ A.T + np.eye(5)
        mem = LBFGSMemory(3)
        for _ in range(3):
            s = rng.standard_normal(5)
            assert mem.update(s, H @ s)
        s, y = mem.pairs[-1]
        np.testing.assert_allclose(mem.matvec(s), y, rtol=1e-10)

    def test_skips_bad_curvature(self):
        mem = LBFGSMemory(2)
        assert not mem.update(np.array([1.0, 0.0]), np.array([-1.0, 0.0]))
        assert len(mem) == 0

    def test_memory_limit(self, rng):
        mem = LBFGSMemory(2)
        for _ in range(5):
            s = rng.standard_normal(3)
            mem.update(s, 2 * s)
        assert len(mem) == 2
        np.testing.assert_allclose(mem.matvec(np.ones(3)), 2 * np.ones(3))


def test_spectral_norm_power_iteration(rng):
    d = 80
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    eig = np.linspace(0.1, 1.0, d)
    eig[-1] = 10.0
    H = Q @ np.diag(eig) @ Q.T
    assert spectral_norm(lambda v: H @ v, d) == pytest.approx(10.0, rel=1e-6)
    assert spectral_norm(lambda v: H[:5, :5] @ v, 5) == pytest.approx(np.max(np.abs(np.linalg.eigvalsh(H[:5, :5]))))


CLIPPED = RadiusPolicy("clipped", alpha=0.5, eta1=10.0, eta2=0.1)


class TestUpdateRadius:
    @pytest.mark.parametrize("gnorm,expected", [(0.05, 0.25), (1.0, 0.5), (20.0, 1.0)])
    def test_clipped_cases(self, gnorm, expected):
        assert update_radius(CLIPPED, gnorm) == pytest.approx(expected)

    def test_proportional(self):
        assert update_radius(RadiusPolicy("proportional", alpha=0.5), 2.0) == 1.0

    def test_zero_gradient(self):
        assert update_radius(CLIPPED, 0.0) == 0.0
        assert update_radius(RadiusPolicy(), 0.0) == 0.0

    def test_boundary_ties_go_to_middle(self):
        assert update_radius(CLIPPED, 0.1) == 0.5
        assert update_radius(CLIPPED, 10.0) == 0.5

    def test_continuity_at_boundaries(self):
        for edge in (0.1, 10.0):
            below = update_radius(CLIPPED, np.nextafter(edge, 0))
            above = update_radius(CLIPPED, np.nextafter(edge, np.inf))
            assert below == pytest.approx(0.5, rel=1e-12)
            assert above == pytest.approx(0.5, rel=1e-12)

    @pytest.mark.parametrize("eta1,eta2", [(0.1, 10.0), (1.0, 1.0), (1.0, 0.0)])
    def test_invalid_clipped_parameters(self, eta1, eta2):
        with pytest.raises(ConfigurationError):
            RadiusPolicy("clipped", 0.5, eta1, eta2)

    def test_negative_norm(self):
        with pytest.raises(InputError):
            update_radius(CLIPPED, -1.0)

    @given(st.floats(0, 1e6), st.floats(0, 1e6), st.sampled_from(["clipped", "proportional"]))
    def test_monotone(self, a, b, mode):
        policy = RadiusPolicy(mode, 0.5, 10.0, 0.1)
        lo, hi = sorted((a, b))
        assert update_radius(policy, lo) <= update_radius(policy, hi)

    @given(st.floats(1e-9, 1e6))
    def test_clipped_range(self, g):
        r = update_radius(CLIPPED, g)
        assert min(10 * 0.5 * g, 0.5) * (1 - 1e-15) <= r <= max(0.1 * 0.5 * g, 0.5) * (1 + 1e-15)
