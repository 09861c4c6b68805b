"""Data-driven state feedback from input/state records.

Records are stored rows-as-samples: ``X`` holds x_0..x_N as rows and ``U``
holds u_0..u_{N-1}. Internally the design works with the column-oriented
matrices X0 = X[:-1]^T, X1 = X[1:]^T and U0 = U^T (n x N, n x N, m x N).

The H2 design solves

    min  Tr(Q_x X0 Q)   s.t.   M(Q) = [[X0 Q - I, X1 Q], [(X1 Q)^T, X0 Q]] >= 0,
                               X0 Q symmetric,

over Q (N x n) and recovers K = U0 Q (X0 Q)^{-1}. The symmetry constraint is
eliminated by parametrizing Q on a basis of its null space, restricted to the
row space of [X0; X1] (other directions leave M and the objective unchanged).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .optim import (
    AffineLmi,
    InfeasibleError,
    PsoOptions,
    barrier_solve,
    canonical_norm,
    LINF,
    phase_one,
    pso,
)

PE_RTOL = 1e-10


class DesignError(ValueError):
    """Raised when the data do not support the requested design."""


@dataclass(frozen=True, eq=False)
class StateDataset:
    """States X ((N+1) x n) and inputs U (N x m), one row per time step."""

    X: np.ndarray
    U: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.array(self.X, dtype=float))
        U = np.array(self.U, dtype=float)
        U = U.reshape(len(U), -1)
        if X.shape[0] != U.shape[0] + 1:
            raise ValueError(f"X needs N+1 rows for N inputs (got {X.shape[0]} and {U.shape[0]})")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(U))):
            raise ValueError("state dataset entries must be finite")
        X.setflags(write=False)
        U.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "U", U)

    @property
    def N(self) -> int:
        return self.U.shape[0]

    @property
    def n(self) -> int:
        return self.X.shape[1]

    @property
    def m(self) -> int:
        return self.U.shape[1]

    @property
    def x_past(self) -> np.ndarray:
        """First N state rows (x_0 .. x_{N-1})."""
        return self.X[:-1]

    @property
    def x_next(self) -> np.ndarray:
        """Last N state rows (x_1 .. x_N)."""
        return self.X[1:]

    def with_inputs(self, U: np.ndarray) -> StateDataset:
        return StateDataset(self.X, U)


def simulate_states(A: np.ndarray, B: np.ndarray, U: np.ndarray, x0: np.ndarray | None = None) -> np.ndarray:
    """State trajectory x_0..x_N (rows) of x+ = A x + B u."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    U = np.asarray(U, dtype=float).reshape(-1, B.shape[1])
    X = np.zeros((U.shape[0] + 1, A.shape[0]))
    if x0 is not None:
        X[0] = x0
    for t, u in enumerate(U):
        X[t + 1] = A @ X[t] + B @ u
    return X


@dataclass(frozen=True)
class PeReport:
    rank: int
    sigma_min: float
    required: int
    passed: bool


def pe_check(d: StateDataset, n: int | None = None, m: int | None = None) -> PeReport:
    """Rank of the stacked matrix [U0; X0] against n + m."""
    n = d.n if n is None else n
    m = d.m if m is None else m
    H = np.hstack([d.U, d.x_past]).T
    s = np.linalg.svd(H, compute_uv=False)
    tol = PE_RTOL * (s[0] if s.size and s[0] > 0 else 1.0) * max(H.shape)
    rank = int(np.sum(s > tol)) if s.size and s[0] > 0 else 0
    smin = float(s[n + m - 1]) if s.size >= n + m else 0.0
    return PeReport(rank, smin, n + m, rank == n + m)


def identify_BA(d: StateDataset) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares (B, A) from X1 = [B A] [U0; X0]."""
    rep = pe_check(d)
    if not rep.passed:
        raise DesignError(f"data not persistently exciting (rank {rep.rank} < {rep.required})")
    H = np.hstack([d.U, d.x_past]).T
    BA = d.x_next.T @ np.linalg.pinv(H)
    return BA[:, : d.m], BA[:, d.m:]


@dataclass(frozen=True)
class KktResidual:
    stationarity: float
    complementarity: float
    primal_feas: float
    dual_feas: float
    stationarity_raw: float = 0.0

    def max(self) -> float:
        return max(self.stationarity, self.complementarity, self.primal_feas, self.dual_feas)

    def as_dict(self) -> dict:
        return {
            "stationarity": self.stationarity,
            "complementarity": self.complementarity,
            "primal_feas": self.primal_feas,
            "dual_feas": self.dual_feas,
            "stationarity_raw": self.stationarity_raw,
        }


@dataclass(frozen=True, eq=False)
class SdpSolution:
    Q: np.ndarray
    Z: np.ndarray
    K: np.ndarray
    objective: float
    kkt: KktResidual
    mu_final: float
    path: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "Q": self.Q.tolist(),
            "Z": self.Z.tolist(),
            "K": self.K.tolist(),
            "objective": self.objective,
            "kkt": self.kkt.as_dict(),
            "mu_final": self.mu_final,
            "path": [list(p) for p in self.path],
        }


def lmi_matrix(d: StateDataset, Q: np.ndarray) -> np.ndarray:
    """M(Q) with the (1,1) and (2,2) blocks symmetrized."""
    n = d.n
    P = d.x_past.T @ Q
    P = 0.5 * (P + P.T)
    W = d.x_next.T @ Q
    return np.block([[P - np.eye(n), W], [W.T, P]])


def kkt_residual(d: StateDataset, Q: np.ndarray, Z: np.ndarray, Q_x: np.ndarray | None = None) -> KktResidual:
    """Residuals of the optimality conditions at a primal/dual pair.

    Stationarity is measured after removing the multiplier of the symmetry
    constraint on X0 Q, i.e. min over skew S of ||G + X0^T S||_F with
    G = X0^T (Q_x^T - Z11 - Z22) - 2 X1^T Z12. The unreduced norm ||G||_F is
    kept as ``stationarity_raw``.
    """
    n = d.n
    Q_x = np.eye(n) if Q_x is None else np.asarray(Q_x, dtype=float)
    Q = np.asarray(Q, dtype=float)
    Z = 0.5 * (np.asarray(Z, dtype=float) + np.asarray(Z, dtype=float).T)
    X0, X1 = d.x_past, d.x_next
    Z11, Z12, Z22 = Z[:n, :n], Z[:n, n:], Z[n:, n:]
    G = X0 @ (Q_x.T - Z11 - Z22) - 2.0 * X1 @ Z12
    iu = np.triu_indices(n, 1)
    if iu[0].size:
        cols = []
        for i, j in zip(*iu):
            S = np.zeros((n, n))
            S[i, j], S[j, i] = 1.0, -1.0
            cols.append((X0 @ S).ravel())
        Bm = np.column_stack(cols)
        coef, *_ = np.linalg.lstsq(Bm, -G.ravel(), rcond=None)
        stat = float(np.linalg.norm(G.ravel() + Bm @ coef))
    else:
        stat = float(np.linalg.norm(G))
    M = lmi_matrix(d, Q)
    P = X0.T @ Q
    asym = float(np.max(np.abs(P - P.T), initial=0.0))
    primal = max(0.0, -float(np.linalg.eigvalsh(M)[0]), asym)
    dual = max(0.0, -float(np.linalg.eigvalsh(Z)[0]))
    return KktResidual(stat, abs(float(np.sum(Z * M))), primal, dual, float(np.linalg.norm(G)))


def _reduced_lmi(d: StateDataset, Q_x: np.ndarray):
    """Affine LMI in coordinates z with Q = sum_k z_k E_k."""
    n, N = d.n, d.N
    X0 = d.x_past.T
    R = scipy.linalg.orth(np.vstack([X0, d.x_next.T]).T)
    r = R.shape[1]
    G = X0 @ R
    rows = []
    for i in range(n):
        for j in range(i + 1, n):
            v = np.zeros((r, n))
            v[:, j] += G[i]
            v[:, i] -= G[j]
            rows.append(v.ravel())
    basis = scipy.linalg.null_space(np.array(rows)) if rows else np.eye(r * n)
    E = np.einsum("Nr,rnk->kNn", R, basis.reshape(r, n, -1))
    M0 = lmi_matrix(d, np.zeros((N, n)))
    Mk = np.array([lmi_matrix(d, e) - M0 for e in E])
    c = np.einsum("ij,kji->k", Q_x @ X0, E)
    return AffineLmi(c, M0, Mk), E


def h2_design(
    d: StateDataset,
    Q_x: np.ndarray | None = None,
    *,
    t0: float = 1.0,
    mu: float = 10.0,
    gap_tol: float = 1e-9,
    newton_tol: float = 1e-10,
) -> SdpSolution:
    """Minimize the data-based H2 cost with a log-det barrier method."""
    n = d.n
    Q_x = np.eye(n) if Q_x is None else np.asarray(Q_x, dtype=float)
    if Q_x.shape != (n, n) or np.linalg.eigvalsh(0.5 * (Q_x + Q_x.T))[0] < -1e-12:
        raise ValueError("Q_x must be a symmetric positive semidefinite n x n matrix")
    rep = pe_check(d)
    if not rep.passed:
        raise DesignError(f"data not persistently exciting (rank {rep.rank} < {rep.required})")
    lmi, E = _reduced_lmi(d, Q_x)
    try:
        z0 = phase_one(lmi)
    except InfeasibleError:
        raise DesignError("design infeasible from data") from None
    res = barrier_solve(lmi, z0, t0=t0, mu=mu, gap_tol=gap_tol, newton_tol=newton_tol)
    Q = np.tensordot(res.z, E, axes=1)
    P = d.x_past.T @ Q
    K = d.U.T @ Q @ np.linalg.inv(0.5 * (P + P.T))
    kkt = kkt_residual(d, Q, res.dual, Q_x)
    return SdpSolution(Q, res.dual, K, float(np.trace(Q_x @ P)), kkt, res.t, res.path)


def gain_from_inputs(d: StateDataset, Q: np.ndarray, U: np.ndarray | None = None) -> np.ndarray:
    """K = U0 Q (X0 Q)^{-1} for the design matrix Q and inputs U (rows)."""
    U = d.U if U is None else np.asarray(U, dtype=float)
    P = d.x_past.T @ Q
    return np.linalg.solve(P.T, (U.T @ Q).T).T


def logdet_objective(A: np.ndarray, B: np.ndarray, K: np.ndarray) -> float:
    """log det((A + BK)(A + BK)^T) = 2 log |det(A + BK)|."""
    sign, val = np.linalg.slogdet(A + B @ K)
    return -np.inf if sign == 0 else 2.0 * float(val)


def eig_attack_input(
    d: StateDataset,
    Q_x: np.ndarray | None,
    budget,
    pso_opts: PsoOptions | None = None,
    seed: int = 0,
    design: SdpSolution | None = None,
):
    """Input poisoning that maximizes log det of the closed-loop product.

    The clean design matrix Q stays fixed; a perturbation dU of the inputs
    moves the gain to K' = (U + dU)^T Q (X0 Q)^{-1}. The attacker scores
    candidates with (A, B) identified from the clean record. The budget is an
    elementwise bound |dU| <= budget.delta_u.
    """
    from .attack_vrft import AttackResult

    if canonical_norm(budget.norm_u) != LINF:
        raise ValueError("the eigenvalue attack uses an elementwise (linf) input budget")
    pso_opts = PsoOptions() if pso_opts is None else pso_opts
    design = h2_design(d, Q_x) if design is None else design
    B, A = identify_BA(d)
    Q = design.Q
    P = d.x_past.T @ Q
    try:
        Pinv = np.linalg.inv(P)
    except np.linalg.LinAlgError:
        Pinv = None
    N, m = d.U.shape
    K0 = design.K
    obj0 = logdet_objective(A, B, K0)

    def batch_objective(D: np.ndarray) -> np.ndarray:
        if Pinv is None:
            return np.full(D.shape[0], -np.inf)
        dK = np.einsum("pNm,Nn->pmn", D.reshape(-1, N, m), Q @ Pinv)
        sign, val = np.linalg.slogdet(A + B @ (K0 + dK))
        return np.where(sign == 0, -np.inf, 2.0 * val)

    res = pso(batch_objective, np.zeros(N * m), budget.delta_u, pso_opts, seed, vectorized=True)
    dU = np.clip(res.x.reshape(N, m), -budget.delta_u, budget.delta_u)
    Kp = K0 + dU.T @ Q @ Pinv if Pinv is not None else K0
    from .lti import spectral_radius

    meta = {
        "objective_clean": obj0,
        "spectral_radius_clean": spectral_radius(A + B @ K0),
        "spectral_radius": spectral_radius(A + B @ Kp),
        "K_clean": K0.tolist(),
    }
    return AttackResult(
        a_u=dU,
        a_y=np.zeros(0),
        theta_poisoned=Kp,
        theta_clean=K0,
        objective=float(res.value),
        objective_trace=[float(v) for v in res.trace],
        iterations=res.iterations,
        converged=res.converged,
        budget=budget,
        seed=seed,
        metadata=meta,
    )


def lyapunov_gramian(Acl: np.ndarray) -> np.ndarray:
    """W solving Acl W Acl^T - W + I = 0 by a vectorized (Kronecker) solve."""
    n = Acl.shape[0]
    lhs = np.eye(n * n) - np.kron(Acl, Acl)
    W = np.linalg.solve(lhs, np.eye(n).ravel()).reshape(n, n)
    return 0.5 * (W + W.T)


def h2_closed_loop(A: np.ndarray, B: np.ndarray, K: np.ndarray, Q_x: np.ndarray | None = None) -> float:
    """Tr(Q_x W) with W the closed-loop Gramian; raises if A + BK is unstable."""
    from .lti import UnstableLoopError, is_unstable

    Acl = np.asarray(A, dtype=float) + np.asarray(B, dtype=float) @ np.asarray(K, dtype=float)
    if is_unstable(Acl):
        raise UnstableLoopError("Gramian undefined: closed loop is unstable")
    Q_x = np.eye(Acl.shape[0]) if Q_x is None else np.asarray(Q_x, dtype=float)
    return float(np.trace(Q_x @ lyapunov_gramian(Acl)))


def read_state_csv(path: str | Path, n: int) -> StateDataset:
    """Rows of n state values followed by m inputs; the last row may omit inputs."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and not _is_number(rows[0][0]):
        rows = rows[1:]
    X = np.array([[float(v) for v in r[:n]] for r in rows])
    U = np.array([[float(v) for v in r[n:]] for r in rows[:-1]])
    return StateDataset(X, U)


def write_state_csv(d: StateDataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(d.n)] + [f"u{j}" for j in range(d.m)])
        for t in range(d.N + 1):
            row = [format(v, ".17g") for v in d.X[t]]
            if t < d.N:
                row += [format(v, ".17g") for v in d.U[t]]
            w.writerow(row)


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True
