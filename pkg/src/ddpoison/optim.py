"""Optimization primitives shared by the attacks and the SDP design.

- norm-ball projections (L2 radial scaling, Linf clamping)
- projected gradient ascent/descent with Armijo backtracking
- particle swarm search on a box
- damped Newton steps on t * c^T z - log det M(z) for an affine LMI, with a
  barrier path-following driver and a phase-I feasibility search
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

L2 = "l2"
LINF = "linf"
_NORM_ALIASES = {"l2": L2, "2": L2, "linf": LINF, "inf": LINF, "l_inf": LINF}


def canonical_norm(name: str) -> str:
    try:
        return _NORM_ALIASES[str(name).lower()]
    except KeyError:
        raise ValueError(f"unknown norm {name!r}; use 'l2' or 'linf'") from None


def make_rng(*keys: int) -> np.random.Generator:
    """Counter-based generator keyed by a tuple of nonnegative integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in keys])))


def vector_norm(x: np.ndarray, norm: str = L2) -> float:
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0:
        return 0.0
    return float(np.max(np.abs(x)) if canonical_norm(norm) == LINF else np.linalg.norm(x))


@dataclass(frozen=True)
class OptimizerOptions:
    """Settings for the alternating attack loops.

    ``gamma0`` is the first trial step as a fraction of the ball radius;
    ``au_iterations`` bounds each restart of the inner u-step ascent.
    """

    max_outer: int = 30
    max_inner: int = 25
    eta: float = 1e-6
    gamma0: float = 1.0
    restarts: int = 8
    seed: int = 0
    au_iterations: int = 100

    def __post_init__(self):
        if min(self.max_outer, self.max_inner, self.au_iterations) < 1 or self.restarts < 0:
            raise ValueError("iteration counts must be positive")
        if self.eta <= 0 or self.gamma0 <= 0:
            raise ValueError("eta and gamma0 must be positive")


@dataclass(frozen=True)
class PsoOptions:
    particles: int = 64
    inertia: float = 0.729
    cognitive: float = 1.494
    social: float = 1.494
    iterations: int = 300

    def __post_init__(self):
        if self.particles < 2:
            raise ValueError("need at least two particles")
        if not 0.0 < self.inertia < 1.0:
            raise ValueError("inertia must lie in (0, 1)")
        if self.iterations < 1:
            raise ValueError("iterations must be positive")


def project_ball(x: np.ndarray, center: np.ndarray, delta: float, norm: str = L2) -> np.ndarray:
    """Nearest point to ``x`` in the closed ``norm`` ball of radius ``delta``."""
    x = np.asarray(x, dtype=float)
    center = np.broadcast_to(np.asarray(center, dtype=float), x.shape)
    if delta < 0:
        raise ValueError("radius must be nonnegative")
    d = x - center
    if canonical_norm(norm) == LINF:
        return center + np.clip(d, -delta, delta)
    r = np.linalg.norm(d)
    if r <= delta:
        return x.copy()
    return center + d * (delta / r)


@dataclass
class SearchResult:
    x: np.ndarray
    value: float
    trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def pga(
    f: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray],
    proj: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    *,
    radius: float,
    max_iter: int = 100,
    gamma0: float = 0.1,
    maximize: bool = True,
    armijo: float = 1e-4,
    tol: float = 0.0,
) -> SearchResult:
    """Projected gradient ascent (or descent) with halving backtracking.

    Each iteration first tries a step of length ``gamma0 * radius`` along the
    gradient, then halves until the Armijo condition holds. The best visited
    point is returned; ``converged`` means no admissible step was found or the
    improvement fell below ``tol * (1 + |f|)``.
    """
    sign = 1.0 if maximize else -1.0
    x = proj(np.asarray(x0, dtype=float))
    fx = f(x)
    res = SearchResult(x.copy(), fx, [fx])
    if radius <= 0:
        res.converged = True
        return res
    min_len = 1e-13 * max(radius, vector_norm(x))
    for it in range(1, max_iter + 1):
        res.iterations = it
        g = sign * np.asarray(grad(x), dtype=float)
        gn = np.linalg.norm(g)
        if not np.isfinite(gn) or gn == 0.0:
            res.converged = True
            break
        step = gamma0 * radius / gn
        accepted = False
        while step * gn >= min_len:
            xn = proj(x + step * g)
            fn = f(xn)
            if np.isfinite(fn) and sign * (fn - fx) >= armijo * (g @ (xn - x)) and sign * (fn - fx) > 0:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            res.converged = True
            break
        gain = abs(fn - fx)
        x, fx = xn, fn
        res.trace.append(fx)
        if sign * (fx - res.value) > 0:
            res.x, res.value = x.copy(), fx
        if gain <= tol * (1.0 + abs(fx)):
            res.converged = True
            break
    return res


def pso(
    f: Callable[[np.ndarray], np.ndarray],
    center: np.ndarray,
    delta: float | np.ndarray,
    opts: PsoOptions,
    seed: int | Sequence[int],
    *,
    maximize: bool = True,
    vectorized: bool = False,
) -> SearchResult:
    """Constriction-form particle swarm on the box |x - center| <= delta.

    ``f`` maps one point to a scalar, or a (P, d) batch to P values when
    ``vectorized``. Particle 0 starts at the center, so the result is never
    worse than the unperturbed point. Ties resolve to the lowest index.
    """
    center = np.asarray(center, dtype=float).ravel()
    dim = center.size
    half = np.broadcast_to(np.asarray(delta, dtype=float), (dim,)).copy()
    if np.any(half < 0):
        raise ValueError("box half-widths must be nonnegative")
    sign = 1.0 if maximize else -1.0
    keys = (seed,) if np.isscalar(seed) else tuple(seed)
    rng = make_rng(*keys)

    def evaluate(X):
        vals = f(X) if vectorized else np.array([f(x) for x in X])
        vals = sign * np.asarray(vals, dtype=float)
        return np.where(np.isnan(vals), -np.inf, vals)

    lo, hi = center - half, center + half
    P = opts.particles
    X = lo + (hi - lo) * rng.random((P, dim))
    X[0] = center
    V = (hi - lo) * (rng.random((P, dim)) - 0.5)
    vals = evaluate(X)
    pbest, pval = X.copy(), vals.copy()
    g = int(np.argmax(pval))
    res = SearchResult(pbest[g].copy(), sign * pval[g], [sign * pval[g]])
    vmax = hi - lo
    for it in range(1, opts.iterations + 1):
        r1 = rng.random((P, dim))
        r2 = rng.random((P, dim))
        V = opts.inertia * V + opts.cognitive * r1 * (pbest - X) + opts.social * r2 * (pbest[g] - X)
        V = np.clip(V, -vmax, vmax)
        X = np.clip(X + V, lo, hi)
        vals = evaluate(X)
        better = vals > pval
        pbest[better] = X[better]
        pval[better] = vals[better]
        g = int(np.argmax(pval))
        res.trace.append(sign * pval[g])
        res.iterations = it
    res.x, res.value = pbest[g].copy(), sign * pval[g]
    res.converged = True
    return res


# ---------------------------------------------------------------------------
# log-det barrier machinery


class InfeasibleError(ValueError):
    """Raised when no strictly feasible point of an LMI is found."""


@dataclass(frozen=True, eq=False)
class AffineLmi:
    """Linear objective c^T z subject to M(z) = M0 + sum_k z_k M_k > 0."""

    c: np.ndarray
    M0: np.ndarray
    Mk: np.ndarray

    @property
    def dim(self) -> int:
        return self.M0.shape[0]

    def M(self, z: np.ndarray) -> np.ndarray:
        return self.M0 + np.tensordot(z, self.Mk, axes=1)


@dataclass
class NewtonResult:
    z: np.ndarray
    decrement: float
    iterations: int
    converged: bool
    stopped_early: bool = False


def _barrier_value(lmi: AffineLmi, z: np.ndarray, t: float) -> float:
    """t c^T z - log det M(z), or +inf outside the cone."""
    try:
        L = np.linalg.cholesky(lmi.M(z))
    except np.linalg.LinAlgError:
        return np.inf
    return float(t * (lmi.c @ z) - 2.0 * np.sum(np.log(np.diag(L))))


def newton_step(lmi: AffineLmi, z: np.ndarray, t: float, damping: float = 0.0):
    """Newton direction and squared decrement of the barrier objective at z."""
    L = np.linalg.cholesky(lmi.M(z))
    Li = np.linalg.inv(L)
    W = np.einsum("ij,kjl,ml->kim", Li, lmi.Mk, Li)
    g = t * lmi.c - np.einsum("kii->k", W)
    H = np.einsum("kij,lij->kl", W, W)
    scale = max(1.0, float(np.max(np.abs(np.diag(H)))))
    while True:
        try:
            F = np.linalg.cholesky(H + damping * scale * np.eye(H.shape[0]))
            break
        except np.linalg.LinAlgError:
            damping = 1e-12 if damping == 0.0 else 10.0 * damping
    dz = -np.linalg.solve(F.T, np.linalg.solve(F, g))
    return dz, float(-g @ dz)


def newton_logdet(
    lmi: AffineLmi,
    z: np.ndarray,
    t: float,
    *,
    tol: float = 1e-10,
    max_iter: int = 200,
    stop: Callable[[np.ndarray], bool] | None = None,
) -> NewtonResult:
    """Minimize t c^T z - log det M(z) from a strictly feasible z.

    Backtracking keeps every accepted iterate strictly inside the cone.
    ``stop`` ends the minimization as soon as it returns true.
    """
    z = np.asarray(z, dtype=float).copy()
    f = _barrier_value(lmi, z, t)
    if not np.isfinite(f):
        raise ValueError("Newton iterate must satisfy M(z) > 0")
    lam2 = np.inf
    for it in range(1, max_iter + 1):
        dz, lam2 = newton_step(lmi, z, t)
        if lam2 / 2.0 <= tol:
            return NewtonResult(z, lam2, it, True)
        s = 1.0
        while s > 1e-16:
            fn = _barrier_value(lmi, z + s * dz, t)
            if fn <= f - 0.25 * s * lam2:
                break
            s *= 0.5
        else:
            return NewtonResult(z, lam2, it, False)
        z = z + s * dz
        f = fn
        if stop is not None and stop(z):
            return NewtonResult(z, lam2, it, False, stopped_early=True)
    return NewtonResult(z, lam2, max_iter, False)


@dataclass
class BarrierResult:
    z: np.ndarray
    t: float
    dual: np.ndarray
    path: list
    newton_iterations: int
    converged: bool


def barrier_solve(
    lmi: AffineLmi,
    z0: np.ndarray,
    *,
    t0: float = 1.0,
    mu: float = 10.0,
    gap_tol: float = 1e-9,
    newton_tol: float = 1e-10,
    refine: bool = True,
) -> BarrierResult:
    """Path following on the central path until dim(M) / t < gap_tol.

    Returns the final iterate, the dual estimate (M(z)^{-1} / t, refined by
    ``refine_dual`` unless ``refine`` is false) and the objective after every
    barrier stage.
    """
    z = np.asarray(z0, dtype=float).copy()
    t = t0
    path = []
    total = 0
    converged = True
    while True:
        nr = newton_logdet(lmi, z, t, tol=newton_tol)
        z = nr.z
        total += nr.iterations
        converged &= nr.converged
        path.append((t, float(lmi.c @ z)))
        if lmi.dim / t < gap_tol:
            break
        t *= mu
    dual = refine_dual(lmi, z, t) if refine else np.linalg.inv(lmi.M(z)) / t
    return BarrierResult(z, t, dual, path, total, converged)


def refine_dual(lmi: AffineLmi, z: np.ndarray, t: float) -> np.ndarray:
    """Dual estimate M^{-1}/t corrected to satisfy c_k = <Z, M_k> exactly.

    The correction lives in span{M^{-1} M_k M^{-1}}, which is concentrated on
    the near-active eigenspace of M, so Z stays positive semidefinite. It is a
    backward-stable least-squares solve, unlike the primal Newton system whose
    conditioning grows like t^2.
    """
    Mi = np.linalg.inv(lmi.M(z))
    Mi = 0.5 * (Mi + Mi.T)
    Z0 = Mi / t
    D = np.einsum("ij,ljk,km->lim", Mi, lmi.Mk, Mi) / t
    A = np.einsum("kij,lij->kl", lmi.Mk, D)
    r = lmi.c - np.einsum("ij,kij->k", Z0, lmi.Mk)
    lam = np.linalg.lstsq(A, r, rcond=None)[0]
    Z = Z0 + np.tensordot(lam, D, axes=1)
    return 0.5 * (Z + Z.T)


def phase_one(lmi: AffineLmi, z0: np.ndarray | None = None, *, t_max: float = 1e10) -> np.ndarray:
    """Find z with M(z) > 0 by driving the slack s of M(z) + s I below zero.

    A step that crosses s = 0 is shortened so the new slack is minus half the
    old one, which keeps the returned point near the analytic center instead of
    running off along an unbounded direction.
    """
    p = lmi.Mk.shape[0]
    z = np.zeros(p) if z0 is None else np.asarray(z0, dtype=float)
    s0 = max(0.0, -float(np.linalg.eigvalsh(lmi.M(z))[0])) + 1.0
    aug = AffineLmi(
        np.concatenate([np.zeros(p), [1.0]]),
        lmi.M0,
        np.concatenate([lmi.Mk, np.eye(lmi.dim)[None]], axis=0),
    )
    w = np.concatenate([z, [s0]])
    t = 1.0
    while t <= t_max:
        f = _barrier_value(aug, w, t)
        for _ in range(200):
            dw, lam2 = newton_step(aug, w, t)
            if lam2 / 2.0 <= 1e-10:
                break
            step = 1.0
            while step > 1e-16:
                fn = _barrier_value(aug, w + step * dw, t)
                if fn <= f - 0.25 * step * lam2:
                    break
                step *= 0.5
            else:
                break
            if w[-1] + step * dw[-1] < 0:
                step = min(step, 1.5 * w[-1] / -dw[-1])
                return (w + step * dw)[:-1]
            w = w + step * dw
            f = fn
        t *= 10.0
    raise InfeasibleError("no strictly feasible point found")
