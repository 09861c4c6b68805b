"""Poisoning attacks on the least-squares controller fit.

The attacker perturbs the record (u, y) into (u + a_u, y + a_y) within norm
budgets. Three attacks are provided:

maxmin_attack    maximize the learner loss on the clean record, evaluated at
                 the parameters fitted on the poisoned record
targeted_attack  steer the fitted parameters toward a chosen vector
random_attack    Gaussian perturbations on the budget boundary (baseline)

plus two a-priori certificates (parameter-shift and loss bounds).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .grad import vjp_theta_ay
from .optim import (
    L2,
    LINF,
    OptimizerOptions,
    canonical_norm,
    make_rng,
    pga,
    project_ball,
    vector_norm,
)
from .vrft import VrftError, VrftProblem, build_phi, check_excitation, fit_phi

FEAS_RTOL = 1e-9


@dataclass(frozen=True)
class AttackBudget:
    """Perturbation radii and norms; sparsity fractions other than 1 are rejected."""

    delta_u: float = 0.0
    delta_y: float = 0.0
    norm_u: str = L2
    norm_y: str = L2
    rho_u: float = 1.0
    rho_y: float = 1.0

    def __post_init__(self):
        if self.delta_u < 0 or self.delta_y < 0:
            raise ValueError("budget radii must be nonnegative")
        for rho in (self.rho_u, self.rho_y):
            if not 0.0 <= rho <= 1.0:
                raise ValueError("sparsity fractions must lie in [0, 1]")
            if rho != 1.0:
                raise ValueError("sparsity constraints unsupported")
        object.__setattr__(self, "norm_u", canonical_norm(self.norm_u))
        object.__setattr__(self, "norm_y", canonical_norm(self.norm_y))

    @classmethod
    def relative(cls, eps_u: float, eps_y: float, u: np.ndarray, y: np.ndarray, **kw) -> AttackBudget:
        """Radii eps_u * ||u||_2 and eps_y * ||y||_2."""
        return cls(eps_u * float(np.linalg.norm(u)), eps_y * float(np.linalg.norm(y)), **kw)

    def l2_radii(self, N: int) -> tuple[float, float]:
        """Radii of L2 balls containing the budget sets (for the certificates)."""
        su = np.sqrt(N) if self.norm_u == LINF else 1.0
        sy = np.sqrt(N) if self.norm_y == LINF else 1.0
        return self.delta_u * su, self.delta_y * sy

    def to_dict(self) -> dict:
        return {
            "delta_u": self.delta_u,
            "delta_y": self.delta_y,
            "norm_u": self.norm_u,
            "norm_y": self.norm_y,
            "rho_u": self.rho_u,
            "rho_y": self.rho_y,
        }


@dataclass
class AttackResult:
    """Attack signals, clean and poisoned parameters, and diagnostics.

    For the state-feedback attack ``a_u`` is the N x m input perturbation and
    the parameter fields hold gain matrices.
    """

    a_u: np.ndarray
    a_y: np.ndarray
    theta_poisoned: np.ndarray
    theta_clean: np.ndarray
    objective: float
    objective_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = True
    budget: AttackBudget | None = None
    seed: Any = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "a_u": np.asarray(self.a_u).tolist(),
            "a_y": np.asarray(self.a_y).tolist(),
            "theta_clean": np.asarray(self.theta_clean).tolist(),
            "theta_poisoned": np.asarray(self.theta_poisoned).tolist(),
            "objective": self.objective,
            "objective_trace": list(self.objective_trace),
            "iterations": self.iterations,
            "converged": self.converged,
            "budget": None if self.budget is None else self.budget.to_dict(),
            "seed": self.seed,
            "metadata": self.metadata,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


# ---------------------------------------------------------------------------
# certificates


def _clean(p: VrftProblem):
    if p.dataset is None:
        raise ValueError("problem carries no clean dataset")
    return p.dataset.u, p.dataset.y


def operator_norm_T(p: VrftProblem, N: int) -> float:
    """Largest singular value of [T_1 ... T_nk]."""
    key = ("sigma_T", N)
    if key not in p._cache:
        T = np.hstack(list(p.operators(N)))
        gram = T @ T.T
        p._cache[key] = float(np.sqrt(max(np.linalg.eigvalsh(gram)[-1], 0.0)))
    return p._cache[key]


def bound_diagnostics(p: VrftProblem, b: AttackBudget) -> dict:
    """Constants entering both certificates, with L2-converted radii."""
    u, y = _clean(p)
    N = u.size
    phi = build_phi(y, p)
    s = check_excitation(phi)
    sigma_min_P = float(s[-1] ** 2)
    sigma_T = operator_norm_T(p, N)
    du, dy = b.l2_radii(N)
    theta = fit_phi(phi, u)
    r = u - phi @ theta
    return {
        "sigma_max_T": sigma_T,
        "sigma_min_P": sigma_min_P,
        "gamma": sigma_T / sigma_min_P,
        "norm_u": float(np.linalg.norm(u)),
        "norm_y": float(np.linalg.norm(y)),
        "delta_u_l2": du,
        "delta_y_l2": dy,
        "clean_loss": float(r @ r / N),
        "n_k": p.n_k,
    }


def _shift(diag: dict) -> float:
    return diag["norm_y"] * diag["delta_u_l2"] + diag["norm_u"] * diag["delta_y_l2"]


def theta_shift_bound(p: VrftProblem, b: AttackBudget) -> float:
    """gamma * sqrt(n_k) * (||y|| delta_u + ||u|| delta_y), gamma = sigma_max(T) / sigma_min(Phi^T Phi)."""
    diag = bound_diagnostics(p, b)
    return diag["gamma"] * np.sqrt(diag["n_k"]) * _shift(diag)


def maxmin_upper_bound(p: VrftProblem, b: AttackBudget) -> float:
    """(sqrt(L_clean) + n_k ||y|| sigma_max(T)^2 / sigma_min(P) * (||y|| delta_u + ||u|| delta_y))^2."""
    diag = bound_diagnostics(p, b)
    coef = diag["n_k"] * diag["norm_y"] * diag["sigma_max_T"] ** 2 / diag["sigma_min_P"]
    return (np.sqrt(diag["clean_loss"]) + coef * _shift(diag)) ** 2


# ---------------------------------------------------------------------------
# attacks


class _Learner:
    """Clean record plus cached quantities shared by the attack loops."""

    def __init__(self, p: VrftProblem):
        self.p = p
        self.u, self.y = (np.asarray(v, dtype=float) for v in _clean(p))
        self.N = self.u.size
        self.phi = build_phi(self.y, p)
        self.theta = fit_phi(self.phi, self.u)

    def loss(self, theta: np.ndarray) -> float:
        r = self.u - self.phi @ theta
        return float(r @ r / self.N)

    def loss_grad(self, theta: np.ndarray) -> np.ndarray:
        return -2.0 / self.N * self.phi.T @ (self.u - self.phi @ theta)

    def fit(self, a_u: np.ndarray, a_y: np.ndarray) -> np.ndarray:
        return fit_phi(build_phi(self.y + a_y, self.p), self.u + a_u)


def _boundary_scale(a: np.ndarray, delta: float, norm: str) -> np.ndarray:
    n = vector_norm(a, norm)
    return a * (delta / n) if n > 0 else a


def _random_on_boundary(rng: np.random.Generator, N: int, delta: float, norm: str) -> np.ndarray:
    if delta == 0:
        return np.zeros(N)
    return _boundary_scale(rng.standard_normal(N), delta, norm)


def _feasible(a: np.ndarray, delta: float, norm: str) -> np.ndarray:
    """Guard against rounding: pull a back inside its ball."""
    return project_ball(a, np.zeros_like(a), delta, norm)


def _u_step_maxmin(L: _Learner, a_u: np.ndarray, a_y: np.ndarray, b: AttackBudget, opts, rng) -> np.ndarray:
    """Maximize the clean loss over a_u for fixed a_y (convex, so maxima lie on the boundary)."""
    phi_p = build_phi(L.y + a_y, L.p)
    check_excitation(phi_p)
    Qf, Rf = np.linalg.qr(phi_p)

    def theta_of(a):
        return np.linalg.solve(Rf, Qf.T @ (L.u + a))

    def f(a):
        return L.loss(theta_of(a))

    def g(a):
        return Qf @ np.linalg.solve(Rf.T, L.loss_grad(theta_of(a)))

    def proj(a):
        return project_ball(a, 0.0, b.delta_u, b.norm_u)

    starts = [a_u] + [_random_on_boundary(rng, L.N, b.delta_u, b.norm_u) for _ in range(opts.restarts)]
    best, fbest = a_u, f(a_u)
    for x0 in starts:
        res = pga(f, g, proj, x0, radius=b.delta_u, max_iter=opts.au_iterations,
                  gamma0=max(opts.gamma0, 0.5), tol=1e-12)
        cand = res.x
        if b.norm_u == L2:
            ext = _boundary_scale(cand, b.delta_u, L2)
            if f(ext) >= f(cand):
                cand = ext
        fc = f(cand)
        if fc > fbest:
            best, fbest = cand, fc
    return best


def _y_step(L: _Learner, a_u, a_y, b: AttackBudget, opts, objective, objective_grad, maximize):
    """A few projected-gradient steps on a_y using the analytic Jacobian."""
    u_p = L.u + a_u

    def theta_of(a):
        return L.fit(a_u, a)

    def f(a):
        try:
            return objective(theta_of(a))
        except (VrftError, np.linalg.LinAlgError):
            return -np.inf if maximize else np.inf

    def g(a):
        th = theta_of(a)
        return vjp_theta_ay(L.p, u_p, L.y + a, th, objective_grad(th))

    def proj(a):
        return project_ball(a, 0.0, b.delta_y, b.norm_y)

    res = pga(f, g, proj, a_y, radius=b.delta_y, max_iter=opts.max_inner,
              gamma0=opts.gamma0, maximize=maximize)
    return res.x


def _result(L, a_u, a_y, theta_p, J, trace, it, converged, b, seed, extra=None):
    diag = bound_diagnostics(L.p, b)
    meta = {
        "clean_loss": L.loss(L.theta),
        "learner_loss_poisoned": None,
        "theta_shift": float(np.linalg.norm(theta_p - L.theta)),
        "theta_shift_bound": diag["gamma"] * np.sqrt(diag["n_k"]) * _shift(diag),
        "maxmin_upper_bound": float(
            (np.sqrt(diag["clean_loss"])
             + diag["n_k"] * diag["norm_y"] * diag["sigma_max_T"] ** 2 / diag["sigma_min_P"] * _shift(diag)) ** 2
        ),
        "gamma": diag["gamma"],
        "sigma_min_P": diag["sigma_min_P"],
        "sigma_max_T": diag["sigma_max_T"],
    }
    try:
        phi_p = build_phi(L.y + a_y, L.p)
        r = L.u + a_u - phi_p @ theta_p
        meta["learner_loss_poisoned"] = float(r @ r / L.N)
    except VrftError:
        pass
    meta.update(extra or {})
    return AttackResult(a_u, a_y, theta_p, L.theta.copy(), float(J), trace, it, converged, b, seed, meta)


def _maxmin_from(L: _Learner, b: AttackBudget, opts: OptimizerOptions, rng, a_u, a_y):
    """One run of the alternating scheme from (a_u, a_y); returns the best iterate."""
    theta = L.fit(a_u, a_y)
    J = L.loss(theta)
    best = (J, a_u.copy(), a_y.copy(), theta)
    trace = [J]
    it = 0
    for it in range(1, opts.max_outer + 1):
        try:
            if b.delta_u > 0:
                a_u = _u_step_maxmin(L, a_u, a_y, b, opts, rng)
            if b.delta_y > 0:
                a_y = _y_step(L, a_u, a_y, b, opts, L.loss, L.loss_grad, maximize=True)
            theta = L.fit(a_u, a_y)
        except (VrftError, np.linalg.LinAlgError):
            return best, trace, it, False
        J_new = L.loss(theta)
        trace.append(J_new)
        if J_new > best[0]:
            best = (J_new, a_u.copy(), a_y.copy(), theta)
        if abs(J_new - J) <= opts.eta * (1.0 + abs(J)):
            return best, trace, it, True
        J = J_new
    return best, trace, it, False


def maxmin_attack(p: VrftProblem, b: AttackBudget, opts: OptimizerOptions | None = None, seed: int = 0) -> AttackResult:
    """Alternating maximization of the clean-record loss at the poisoned fit.

    Each outer iteration maximizes over a_u (projected ascent with random
    restarts plus a warm start) and then takes up to ``max_inner`` ascent
    steps on a_y. Stops when the objective changes by at most
    eta * (1 + |J|). The scheme runs from two starts, no perturbation and
    the corner that scales u up and y down (which inflates the fitted gain),
    and the best visited iterate is returned.
    """
    opts = OptimizerOptions() if opts is None else opts
    L = _Learner(p)
    rng = make_rng(seed)
    zero = np.zeros(L.N)
    if b.delta_u == 0 and b.delta_y == 0:
        J = L.loss(L.theta)
        return _result(L, zero, zero.copy(), L.theta.copy(), J, [J], 0, True, b, seed)
    starts = {
        "zero": (zero, zero.copy()),
        "gain_up": (_boundary_scale(L.u, b.delta_u, b.norm_u), -_boundary_scale(L.y, b.delta_y, b.norm_y)),
    }
    runs = {}
    for name, (a_u0, a_y0) in starts.items():
        try:
            runs[name] = _maxmin_from(L, b, opts, rng, a_u0.copy(), a_y0.copy())
        except (VrftError, np.linalg.LinAlgError):
            continue
    if not runs:
        J = L.loss(L.theta)
        return _result(L, zero, zero.copy(), L.theta.copy(), J, [J], 0, False, b, seed)
    name = max(runs, key=lambda k: runs[k][0][0])
    (J, a_u, a_y, theta), trace, _, converged = runs[name]
    iterations = sum(r[2] for r in runs.values())
    a_u = _feasible(a_u, b.delta_u, b.norm_u)
    a_y = _feasible(a_y, b.delta_y, b.norm_y)
    extra = {"start": name, "start_objectives": {k: r[0][0] for k, r in runs.items()}}
    return _result(L, a_u, a_y, theta, J, trace, iterations, converged, b, seed, extra)


def _u_step_targeted(L: _Learner, a_y: np.ndarray, theta_a: np.ndarray, b: AttackBudget) -> np.ndarray:
    """Smallest a_u putting the fit at theta_a for fixed a_y, radially scaled into the budget."""
    phi_p = build_phi(L.y + a_y, L.p)
    check_excitation(phi_p)
    Qf, Rf = np.linalg.qr(phi_p)
    # P = R^{-1} Q^T has pseudoinverse Q R, so the minimum-norm solution of
    # P (u + a) = theta_a is a = Q (R theta_a - Q^T u).
    a = Qf @ (Rf @ theta_a - Qf.T @ L.u)
    if vector_norm(a, b.norm_u) > b.delta_u:
        a = _boundary_scale(a, b.delta_u, b.norm_u) if b.delta_u > 0 else np.zeros_like(a)
    return a


def targeted_attack(
    p: VrftProblem,
    theta_a: np.ndarray,
    b: AttackBudget,
    opts: OptimizerOptions | None = None,
    seed: int = 0,
) -> AttackResult:
    """Alternating minimization of ||theta_a - theta(u', y')||^2.

    The a_u step is closed form; the a_y step is projected gradient descent.
    """
    opts = OptimizerOptions() if opts is None else opts
    theta_a = np.asarray(theta_a, dtype=float)
    L = _Learner(p)
    if theta_a.shape != L.theta.shape:
        raise ValueError("target has the wrong length")

    def dist(theta):
        e = theta_a - theta
        return float(e @ e)

    def dist_grad(theta):
        return 2.0 * (theta - theta_a)

    a_u = np.zeros(L.N)
    a_y = np.zeros(L.N)
    J = dist(L.theta)
    best = (J, a_u, a_y, L.theta.copy())
    trace = [J]
    converged = False
    it = 0
    if J == 0.0 or (b.delta_u == 0 and b.delta_y == 0):
        return _result(L, a_u, a_y, L.theta.copy(), J, trace, 0, True, b, seed, {"theta_target": theta_a.tolist()})
    for it in range(1, opts.max_outer + 1):
        try:
            if b.delta_u > 0:
                a_u = _u_step_targeted(L, a_y, theta_a, b)
            if b.delta_y > 0:
                a_y = _y_step(L, a_u, a_y, b, opts, dist, dist_grad, maximize=False)
            theta = L.fit(a_u, a_y)
        except (VrftError, np.linalg.LinAlgError):
            break
        J_new = dist(theta)
        trace.append(J_new)
        if J_new < best[0]:
            best = (J_new, a_u.copy(), a_y.copy(), theta)
        if abs(J_new - J) <= opts.eta * (1.0 + abs(J)):
            converged = True
            break
        J = J_new
    J, a_u, a_y, theta = best
    a_u = _feasible(a_u, b.delta_u, b.norm_u)
    a_y = _feasible(a_y, b.delta_y, b.norm_y)
    return _result(L, a_u, a_y, theta, J, trace, it, converged, b, seed, {"theta_target": theta_a.tolist()})


def random_attack(p: VrftProblem, b: AttackBudget, seed: int = 0) -> AttackResult:
    """Gaussian perturbations scaled onto the budget boundary."""
    L = _Learner(p)
    rng = make_rng(seed)
    a_u = _random_on_boundary(rng, L.N, b.delta_u, b.norm_u)
    a_y = _random_on_boundary(rng, L.N, b.delta_y, b.norm_y)
    try:
        theta = L.fit(a_u, a_y)
        J = L.loss(theta)
        ok = True
    except VrftError:
        theta, J, ok = np.full_like(L.theta, np.nan), np.nan, False
    return _result(L, a_u, a_y, theta, J, [J], 1, ok, b, seed)
