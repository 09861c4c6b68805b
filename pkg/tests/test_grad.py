import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from ddpoison.benchmarks import flex_dataset
from ddpoison.grad import (
    assemble_T,
    chain_grad,
    diag_op,
    fd_oracle,
    grad_theta_au,
    grad_theta_ay,
    gradient_bundle,
)
from ddpoison.lti import TransferFunction
from ddpoison.optim import make_rng
from ddpoison.vrft import ControllerBasis, VrftError, VrftProblem, build_phi, learner_loss, vrft_fit

ONE = TransferFunction([1.0], [1.0])
DELAY = TransferFunction([1.0], [1.0, 0.0])


def rel_err(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def instance(base, seed, N=64):
    d = flex_dataset(make_rng(seed).standard_normal(N))
    return base.with_dataset(d), d.u, d.y


class TestDiagOp:
    def test_scalar_identity(self):
        assert_array_equal(diag_op([1.0], 2), np.eye(2))

    def test_zero(self):
        assert_array_equal(diag_op(np.zeros(3), 2), np.zeros((6, 2)))

    @given(st.integers(0, 10**6))
    def test_gram_is_scaled_identity(self, seed):
        x = np.random.default_rng(seed).standard_normal(7)
        D = diag_op(x, 3)
        assert_allclose(D.T @ D, (x @ x) * np.eye(3), rtol=1e-13)


class TestAssembleT:
    def test_trivial_zero(self):
        p = VrftProblem(None, ONE, ONE, ControllerBasis((ONE,)))
        assert_allclose(assemble_T(p, 5), 0.0, atol=1e-15)

    def test_delay_reference(self):
        p = VrftProblem(None, DELAY, ONE, ControllerBasis((ONE,)))
        assert_allclose(assemble_T(p, 5), np.eye(5, k=1) - np.eye(5), atol=1e-14)

    @given(st.integers(0, 10**6))
    def test_phi_consistency(self, seed):
        from ddpoison.benchmarks import flex_problem

        p = flex_problem()
        y = np.random.default_rng(seed).standard_normal(40)
        assert_allclose(assemble_T(p, 40) @ diag_op(y, 6), build_phi(y, p), atol=1e-10)

    def test_include_filter(self, base_problem):
        from ddpoison.lti import toeplitz

        y = np.random.default_rng(0).standard_normal(30)
        TL = assemble_T(base_problem, 30, include_filter=True)
        L = toeplitz(base_problem.filter, 30).entries
        assert_allclose(TL @ diag_op(y, 6), L @ build_phi(y, base_problem), atol=1e-10)


class TestGradAu:
    def test_orthonormal_columns(self):
        Q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((20, 4)))
        assert_allclose(grad_theta_au(Q), Q, atol=1e-13)

    def test_scaling(self):
        phi = np.random.default_rng(1).standard_normal((30, 3))
        assert_allclose(grad_theta_au(3.0 * phi), grad_theta_au(phi) / 3.0, rtol=1e-12)

    def test_matches_finite_differences(self, base_problem):
        p, u, y = instance(base_problem, 11)
        fd = fd_oracle(lambda uu: vrft_fit(uu, y, p), u)
        assert rel_err(grad_theta_au(build_phi(y, p)), fd.T) < 1e-6

    def test_independent_of_u(self, base_problem):
        p, u, y = instance(base_problem, 12)
        b1 = gradient_bundle(p, u, y)
        b2 = gradient_bundle(p, 3.0 * u + 1.0, y)
        assert_array_equal(b1.d_theta_d_au, b2.d_theta_d_au)

    def test_operator_norm_bound(self, base_problem):
        p, u, y = instance(base_problem, 13)
        phi = build_phi(y, p)
        smin = np.linalg.svd(phi, compute_uv=False)[-1]
        assert np.linalg.norm(grad_theta_au(phi), 2) <= 1.0 / smin * (1 + 1e-12)

    def test_singular(self):
        with pytest.raises(VrftError):
            grad_theta_au(np.ones((5, 2)))


class TestGradAy:
    def test_zero_input_zero_theta(self, base_problem):
        y = np.random.default_rng(2).standard_normal(40)
        assert_allclose(grad_theta_ay(base_problem, np.zeros(40), y, np.zeros(6)), 0.0, atol=1e-15)

    def test_matches_finite_differences(self, base_problem):
        p, u, y = instance(base_problem, 14)
        fd = fd_oracle(lambda yy: vrft_fit(u, yy, p), y)
        theta = vrft_fit(u, y, p)
        assert rel_err(grad_theta_ay(p, u, y, theta), fd.T) < 1e-5

    def test_linear_in_u_at_fixed_theta(self, base_problem):
        p, u, y = instance(base_problem, 15)
        theta = np.random.default_rng(3).standard_normal(6)
        u2 = np.random.default_rng(4).standard_normal(u.size)
        g = lambda uu: grad_theta_ay(p, uu, y, theta)
        base = grad_theta_ay(p, np.zeros_like(u), y, theta)
        assert_allclose(g(u + u2) - base, (g(u) - base) + (g(u2) - base), atol=1e-10)

    def test_dense_operator_route(self, base_problem):
        """S built from explicit operator blocks agrees with the filtering route."""
        p, u, y = instance(base_problem, 16, N=40)
        theta = vrft_fit(u, y, p)
        phi = build_phi(y, p)
        r = u - phi @ theta
        Ts = p.operators(40)
        Ctheta = np.tensordot(theta, Ts, axes=1)
        S = np.column_stack([Ts[i].T @ r - Ctheta.T @ phi[:, i] for i in range(6)])
        dense = S @ np.linalg.inv(phi.T @ phi)
        assert_allclose(grad_theta_ay(p, u, y, theta), dense, rtol=1e-8, atol=1e-12)


class TestChainGrad:
    def test_zero_gradient(self, base_problem):
        p, u, y = instance(base_problem, 17, N=32)
        gu, gy = chain_grad(np.zeros(6), gradient_bundle(p, u, y))
        assert_array_equal(gu, 0.0)
        assert_array_equal(gy, 0.0)

    def test_unit_vector_selects_column(self, base_problem):
        p, u, y = instance(base_problem, 18, N=32)
        b = gradient_bundle(p, u, y)
        gu, gy = chain_grad(np.eye(6)[2], b)
        assert_array_equal(gu, b.d_theta_d_au[:, 2])
        assert_array_equal(gy, b.d_theta_d_ay[:, 2])

    def test_maxmin_objective_matches_fd(self, base_problem):
        p, u, y = instance(base_problem, 19, N=48)
        rng = np.random.default_rng(6)
        up = u + 0.1 * np.linalg.norm(u) / np.sqrt(u.size) * rng.standard_normal(u.size)
        yp = y + 0.05 * np.linalg.norm(y) / np.sqrt(y.size) * rng.standard_normal(y.size)

        def objective(uu, yy):
            return learner_loss(u, y, vrft_fit(uu, yy, p), p)

        b = gradient_bundle(p, up, yp)
        phi = build_phi(y, p)
        grad_theta = -2.0 / u.size * phi.T @ (u - phi @ b.theta)
        gu, gy = chain_grad(grad_theta, b)
        fd_u = fd_oracle(lambda uu: objective(uu, yp), up)[0]
        fd_y = fd_oracle(lambda yy: objective(up, yy), yp)[0]
        assert rel_err(gu, fd_u) < 1e-5
        assert rel_err(gy, fd_y) < 1e-5

    def test_bundle_T_shape(self, base_problem):
        p, u, y = instance(base_problem, 20, N=16)
        assert gradient_bundle(p, u, y).T.shape == (16, 16 * 6)


class TestFdOracle:
    def test_linear_exact(self):
        A = np.random.default_rng(5).standard_normal((3, 4))
        assert_allclose(fd_oracle(lambda x: A @ x, np.ones(4)), A, atol=1e-9)

    def test_quadratic(self):
        x0 = np.array([1.0, -2.0, 0.5])
        assert_allclose(fd_oracle(lambda x: x @ x, x0)[0], 2 * x0, atol=1e-8)

    def test_positive_step(self):
        with pytest.raises(ValueError):
            fd_oracle(lambda x: x, np.ones(2), h=0.0)


class TestVjp:
    @given(st.integers(0, 10**6))
    def test_matches_full_jacobian(self, seed):
        from ddpoison.benchmarks import flex_problem
        from ddpoison.grad import vjp_theta_ay

        p = flex_problem()
        rng = np.random.default_rng(seed)
        u, y, w = rng.standard_normal(50), rng.standard_normal(50), rng.standard_normal(6)
        theta = vrft_fit(u, y, p) + 0.1 * rng.standard_normal(6)
        full = grad_theta_ay(p, u, y, theta) @ w
        assert_allclose(vjp_theta_ay(p, u, y, theta, w), full, rtol=1e-9, atol=1e-12 * np.abs(full).max())
