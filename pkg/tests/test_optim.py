import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from ddpoison.optim import (
    L2,
    LINF,
    AffineLmi,
    InfeasibleError,
    OptimizerOptions,
    PsoOptions,
    barrier_solve,
    canonical_norm,
    make_rng,
    newton_logdet,
    phase_one,
    pga,
    project_ball,
    pso,
    vector_norm,
)

vec = st.lists(st.floats(-10, 10), min_size=2, max_size=6)


def scalar_lmi(lower=1.0):
    """min q subject to q - lower >= 0."""
    return AffineLmi(np.array([1.0]), np.array([[-lower]]), np.array([[[1.0]]]))


class TestOptions:
    def test_defaults(self):
        o = OptimizerOptions()
        assert (o.max_inner, o.restarts) == (25, 8)
        p = PsoOptions()
        assert (p.particles, p.inertia, p.cognitive, p.social, p.iterations) == (64, 0.729, 1.494, 1.494, 300)

    def test_invalid(self):
        with pytest.raises(ValueError):
            OptimizerOptions(eta=0.0)
        with pytest.raises(ValueError):
            OptimizerOptions(max_outer=0)
        with pytest.raises(ValueError):
            PsoOptions(particles=1)
        with pytest.raises(ValueError):
            PsoOptions(inertia=1.0)

    def test_norm_aliases(self):
        assert canonical_norm("inf") == LINF
        assert canonical_norm("L2") == L2
        with pytest.raises(ValueError):
            canonical_norm("l1")

    def test_rng_counter_keys(self):
        a = make_rng(1, 2).standard_normal(4)
        assert_array_equal(a, make_rng(1, 2).standard_normal(4))
        assert not np.array_equal(a, make_rng(2, 1).standard_normal(4))


class TestProjectBall:
    def test_interior_unchanged(self):
        x = np.array([0.1, -0.2])
        assert_array_equal(project_ball(x, 0.0, 1.0, L2), x)
        assert_array_equal(project_ball(x, 0.0, 1.0, LINF), x)

    def test_zero_radius(self):
        c = np.array([1.0, 2.0])
        assert_array_equal(project_ball(np.array([5.0, -3.0]), c, 0.0, L2), c)
        assert_array_equal(project_ball(np.array([5.0, -3.0]), c, 0.0, LINF), c)

    def test_negative_radius(self):
        with pytest.raises(ValueError):
            project_ball(np.ones(2), 0.0, -1.0)

    @pytest.mark.parametrize("norm", [L2, LINF])
    def test_nearest_point_against_grid(self, norm):
        rng = np.random.default_rng(0)
        g = np.linspace(-1, 1, 801)
        G = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
        inside = G[np.array([vector_norm(p, norm) <= 1.0 + 1e-12 for p in G])]
        for _ in range(5):
            x = rng.uniform(-3, 3, 2) * 2
            if vector_norm(x, norm) <= 1:
                continue
            p = project_ball(x, 0.0, 1.0, norm)
            assert vector_norm(p, norm) == pytest.approx(1.0)
            best = np.min(np.linalg.norm(inside - x, axis=1))
            assert np.linalg.norm(p - x) <= best + 1e-12

    @given(vec, st.floats(0, 5), st.sampled_from([L2, LINF]))
    def test_idempotent_and_feasible(self, x, delta, norm):
        x = np.array(x)
        p = project_ball(x, 0.0, delta, norm)
        assert vector_norm(p, norm) <= delta * (1 + 1e-12) + 1e-300
        assert_allclose(project_ball(p, 0.0, delta, norm), p, atol=1e-12)

    @given(vec, st.floats(0.01, 5))
    def test_nonexpansive_l2(self, x, delta):
        x = np.array(x)
        y = x[::-1] * 0.7 + 1.0
        px, py = project_ball(x, 0.0, delta, L2), project_ball(y, 0.0, delta, L2)
        assert np.linalg.norm(px - py) <= np.linalg.norm(x - y) + 1e-12


class TestPga:
    def test_concave_quadratic_on_ball(self):
        # max -(x - a)^2 on the unit ball with |a| > 1: optimum a / |a|
        a = np.array([2.0, -1.0, 0.5])
        f = lambda x: -float((x - a) @ (x - a))
        g = lambda x: -2.0 * (x - a)
        proj = lambda x: project_ball(x, 0.0, 1.0, L2)
        res = pga(f, g, proj, np.zeros(3), radius=1.0, max_iter=500, gamma0=0.5)
        assert_allclose(res.x, a / np.linalg.norm(a), atol=1e-6)

    def test_interior_optimum(self):
        a = np.array([0.2, -0.1])
        res = pga(lambda x: -float((x - a) @ (x - a)), lambda x: -2 * (x - a),
                  lambda x: project_ball(x, 0.0, 1.0), np.zeros(2), radius=1.0, max_iter=500, gamma0=0.5)
        assert_allclose(res.x, a, atol=1e-6)

    def test_zero_gradient_returns_start(self):
        x0 = np.array([0.3, 0.4])
        res = pga(lambda x: 1.0, lambda x: np.zeros(2), lambda x: x, x0, radius=1.0)
        assert_array_equal(res.x, x0)
        assert res.converged

    def test_linear_on_l2_ball(self):
        c = np.array([3.0, 4.0])
        res = pga(lambda x: float(c @ x), lambda x: c, lambda x: project_ball(x, 0.0, 2.0), np.zeros(2),
                  radius=2.0, gamma0=1.0)
        assert_allclose(res.x, 2.0 * c / 5.0, atol=1e-12)

    def test_descent_mode(self):
        res = pga(lambda x: float(x @ x), lambda x: 2 * x, lambda x: project_ball(x, 0.0, 5.0),
                  np.array([3.0, 1.0]), radius=5.0, max_iter=200, gamma0=0.5, maximize=False)
        assert np.linalg.norm(res.x) < 1e-6

    @given(st.integers(0, 10**6), st.sampled_from([L2, LINF]))
    def test_feasible_and_improving(self, seed, norm):
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((4, 4))
        b = rng.standard_normal(4)
        f = lambda x: float(np.sin(A @ x).sum() + b @ x)
        g = lambda x: A.T @ np.cos(A @ x) + b
        proj = lambda x: project_ball(x, 0.0, 0.7, norm)
        x0 = proj(rng.standard_normal(4))
        res = pga(f, g, proj, x0, radius=0.7, max_iter=30)
        assert vector_norm(res.x, norm) <= 0.7 * (1 + 1e-12)
        assert res.value >= f(x0)
        assert res.value == pytest.approx(f(res.x))


class TestPso:
    def test_sphere(self):
        c = np.array([0.5, -0.25, 1.0])
        res = pso(lambda x: -float(np.sum((x - c) ** 2)), c, 1.0, PsoOptions(iterations=200), seed=1)
        assert np.max(np.abs(res.x - c)) < 1e-3

    def test_off_center_optimum(self):
        target = np.array([0.3, -0.6])
        res = pso(lambda x: -float(np.sum((x - target) ** 2)), np.zeros(2), 1.0, PsoOptions(iterations=200), seed=2)
        assert np.max(np.abs(res.x - target)) < 1e-3

    def test_constant_objective_feasible(self):
        res = pso(lambda x: 0.0, np.zeros(4), 0.2, PsoOptions(iterations=10), seed=3)
        assert np.max(np.abs(res.x)) <= 0.2

    def test_seed_determinism(self):
        f = lambda x: float(np.cos(3 * x).sum())
        a = pso(f, np.zeros(3), 1.0, PsoOptions(iterations=20), seed=4)
        b = pso(f, np.zeros(3), 1.0, PsoOptions(iterations=20), seed=4)
        assert a.trace == b.trace
        assert_array_equal(a.x, b.x)

    def test_vectorized_matches_scalar(self):
        f = lambda x: float(np.cos(3 * x).sum())
        fv = lambda X: np.cos(3 * X).sum(axis=1)
        a = pso(f, np.zeros(3), 1.0, PsoOptions(iterations=20), seed=5)
        b = pso(fv, np.zeros(3), 1.0, PsoOptions(iterations=20), seed=5, vectorized=True)
        assert_array_equal(a.x, b.x)

    @given(st.integers(0, 10**6))
    def test_trace_nondecreasing_and_box(self, seed):
        f = lambda x: float(np.sin(5 * x).sum() - 0.1 * (x @ x))
        res = pso(f, np.ones(3), 0.5, PsoOptions(particles=8, iterations=15), seed=seed)
        assert np.all(np.diff(res.trace) >= 0)
        assert np.max(np.abs(res.x - 1.0)) <= 0.5
        assert res.value >= f(np.ones(3))


class TestBarrier:
    @pytest.mark.parametrize("t", [1.0, 10.0, 1e3, 1e6])
    def test_central_path_scalar(self, t):
        res = newton_logdet(scalar_lmi(), np.array([5.0]), t)
        assert res.z[0] == pytest.approx(1.0 + 1.0 / t, abs=1e-8)

    def test_limit_approaches_boundary(self):
        res = barrier_solve(scalar_lmi(), np.array([3.0]))
        assert res.z[0] == pytest.approx(1.0, abs=1e-8)
        assert res.dual[0, 0] == pytest.approx(1.0, abs=1e-8)

    def test_path_nonincreasing(self):
        res = barrier_solve(scalar_lmi(), np.array([3.0]))
        objs = [v for _, v in res.path]
        assert np.all(np.diff(objs) <= 1e-12)

    def test_infeasible_start_rejected(self):
        with pytest.raises(ValueError):
            newton_logdet(scalar_lmi(), np.array([0.5]), 1.0)

    def test_iterates_stay_feasible(self):
        lmi = AffineLmi(np.array([1.0, 1.0]), np.diag([-1.0, -2.0]),
                        np.array([np.diag([1.0, 0.0]), np.diag([0.0, 1.0])]))
        seen = []
        newton_logdet(lmi, np.array([10.0, 10.0]), 100.0, stop=lambda z: seen.append(z.copy()) or False)
        assert all(np.linalg.eigvalsh(lmi.M(z))[0] > 0 for z in seen)

    def test_matrix_lmi(self):
        # min z1 + z2 s.t. [[z1, 1], [1, z2]] >= 0 -> z1 = z2 = 1
        lmi = AffineLmi(np.array([1.0, 1.0]), np.array([[0.0, 1.0], [1.0, 0.0]]),
                        np.array([[[1.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 1.0]]]))
        z0 = phase_one(lmi)
        assert np.linalg.eigvalsh(lmi.M(z0))[0] > 0
        res = barrier_solve(lmi, z0)
        assert_allclose(res.z, [1.0, 1.0], atol=1e-7)
        assert_allclose([np.sum(res.dual * M) for M in lmi.Mk], lmi.c, atol=1e-10)
        assert np.linalg.eigvalsh(res.dual)[0] >= -1e-8

    def test_phase_one_infeasible(self):
        # M(z) = diag(z, -z - 1) can never be positive definite
        lmi = AffineLmi(np.zeros(1), np.diag([0.0, -1.0]), np.array([np.diag([1.0, -1.0])]))
        with pytest.raises(InfeasibleError):
            phase_one(lmi)
