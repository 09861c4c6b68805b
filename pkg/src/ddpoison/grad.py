"""Sensitivity of the least-squares controller fit to data perturbations.

With theta(u', y') = (Phi'^T Phi')^{-1} Phi'^T u' and Phi' = Phi(y'), implicit
differentiation of the normal equations gives

    d theta / d u'  =  Phi' (Phi'^T Phi')^{-1}                 (N x n_k)
    d theta / d y'  =  S (Phi'^T Phi')^{-1}                    (N x n_k)

where column i of S is T_i^T (u' - Phi' theta) - (sum_j theta_j T_j)^T Phi'_i.
Row k of each matrix is the derivative of theta with respect to sample k.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .lti import toeplitz
from .vrft import VrftProblem, _lfilter_tf, build_phi, check_excitation


@dataclass(frozen=True, eq=False)
class GradientBundle:
    """Jacobians of the fitted parameters at one perturbed record."""

    d_theta_d_au: np.ndarray
    d_theta_d_ay: np.ndarray
    T: np.ndarray
    theta: np.ndarray


def diag_op(x: np.ndarray, q: int) -> np.ndarray:
    """Block-diagonal (p*q) x q matrix holding q copies of the column x."""
    x = np.asarray(x, dtype=float).reshape(-1, 1)
    return np.kron(np.eye(q), x)


def assemble_T(p: VrftProblem, N: int, include_filter: bool = False) -> np.ndarray:
    """Horizontal stack [T_1, ..., T_nk] so that Phi(y) = T @ diag_op(y, n_k).

    With ``include_filter`` every block is premultiplied by the prefilter's
    convolution matrix, for records that were not filtered beforehand.
    """
    blocks = p.operators(N)
    if include_filter:
        L = toeplitz(p.filter, N).entries
        blocks = np.einsum("ij,kjl->kil", L, blocks)
    return np.hstack(list(blocks))


def _gram_factor(phi: np.ndarray):
    check_excitation(phi)
    return scipy.linalg.cho_factor(phi.T @ phi)


def grad_theta_au(phi: np.ndarray) -> np.ndarray:
    """d theta / d u' = Phi (Phi^T Phi)^{-1}; independent of u'."""
    phi = np.asarray(phi, dtype=float)
    return scipy.linalg.cho_solve(_gram_factor(phi), phi.T).T


def _s_matrix(p: VrftProblem, phi: np.ndarray, residual: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Columns T_i^T r - (sum_j theta_j T_j)^T Phi_i, with T_i = T_{beta_i} V."""
    nk = phi.shape[1]
    V = p.virtual_operator(phi.shape[0])
    W = p.basis_filter_adjoint(np.tile(residual[:, None], (1, nk)))
    C = np.zeros_like(phi)
    for j in range(nk):
        if theta[j] != 0.0:
            C += theta[j] * _adjoint_single(p, j, phi)
    return V.T @ (W - C)


def _adjoint_single(p: VrftProblem, j: int, X: np.ndarray) -> np.ndarray:
    """T_{beta_j}^T applied to every column of X."""
    return _lfilter_tf(p.basis.beta[j], X[::-1])[::-1]


def grad_theta_ay(p: VrftProblem, u: np.ndarray, y: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """d theta / d y' evaluated at (u', y') and the fit ``theta``."""
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    theta = np.asarray(theta, dtype=float)
    phi = build_phi(y, p)
    S = _s_matrix(p, phi, u - phi @ theta, theta)
    return scipy.linalg.cho_solve(_gram_factor(phi), S.T).T


def vjp_theta_ay(p: VrftProblem, u: np.ndarray, y: np.ndarray, theta: np.ndarray, w: np.ndarray) -> np.ndarray:
    """grad_theta_ay(p, u, y, theta) @ w without forming the N x n_k Jacobian.

    Sum_i v_i T_{beta_i}^T is the adjoint of the single filter sum_i v_i beta_i,
    so the product costs two filtering passes and one multiplication by V^T.
    """
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    theta = np.asarray(theta, dtype=float)
    phi = build_phi(y, p)
    v = scipy.linalg.cho_solve(_gram_factor(phi), np.asarray(w, dtype=float))
    r = u - phi @ theta
    a = p.combined_filter_adjoint(v, r) - p.combined_filter_adjoint(theta, phi @ v)
    return p.virtual_operator(y.size).T @ a


def gradient_bundle(p: VrftProblem, u: np.ndarray, y: np.ndarray) -> GradientBundle:
    """Fit at (u', y') and both Jacobians, sharing one factorization."""
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    phi = build_phi(y, p)
    fac = _gram_factor(phi)
    theta = scipy.linalg.cho_solve(fac, phi.T @ u)
    d_au = scipy.linalg.cho_solve(fac, phi.T).T
    d_ay = scipy.linalg.cho_solve(fac, _s_matrix(p, phi, u - phi @ theta, theta).T).T
    return GradientBundle(d_au, d_ay, assemble_T(p, y.size), theta)


def chain_grad(objective_grad_theta: np.ndarray, bundle: GradientBundle) -> tuple[np.ndarray, np.ndarray]:
    """Pull a gradient with respect to theta back to the two perturbations."""
    g = np.asarray(objective_grad_theta, dtype=float)
    return bundle.d_theta_d_au @ g, bundle.d_theta_d_ay @ g


def default_step(x: np.ndarray) -> float:
    return 1e-6 * (1.0 + float(np.max(np.abs(x), initial=0.0)))


def fd_oracle(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float | None = None) -> np.ndarray:
    """Central-difference Jacobian, shape (len(f(x)), len(x))."""
    x = np.asarray(x, dtype=float)
    h = default_step(x) if h is None else float(h)
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    cols = []
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        cols.append((np.atleast_1d(f(xp)) - np.atleast_1d(f(xm))) / (2.0 * h))
    return np.column_stack(cols)


__all__ = [
    "GradientBundle",
    "vjp_theta_ay",
    "assemble_T",
    "chain_grad",
    "diag_op",
    "fd_oracle",
    "grad_theta_au",
    "grad_theta_ay",
    "gradient_bundle",
]
