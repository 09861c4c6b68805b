"""Discrete-time SISO LTI plumbing.

Transfer functions and state-space realizations, simulation, convolution
(Toeplitz) matrices, reference-model inversion, unity-feedback interconnection
and a few spectral utilities. Everything operates under zero initial
conditions unless an explicit ``x0`` is given.

Functions
---------
tf_to_ss          controllable canonical realization
simulate          state recursion driven by an input sequence
toeplitz          lower-triangular convolution matrix of a realization
observability     stacked [C; CA; ...; CA^N]
invert_reference  convolution matrix of the inverse of a reference model
closed_loop       unity negative feedback interconnection
spectral_radius   max |eig|
h2_mismatch       squared H2 distance between closed loop and reference model
filter_dataset    prefilter an input/output record
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import scipy.linalg
from scipy.integrate import trapezoid

LOWER = "lower"
UPPER = "upper"

#: Spectral radii at or above this value count as unstable.
UNSTABLE_RADIUS = 1.0 - 1e-9


class NonCausalError(ValueError):
    """Raised when a realization is requested for an improper transfer function."""


class InversionError(ValueError):
    """Raised when no exact inversion route applies to a reference model."""


class UnstableLoopError(ValueError):
    """Raised when a quantity is only defined for a stable closed loop."""


def _frozen(a: Any, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=float, ndmin=ndim)
    arr.setflags(write=False)
    return arr


def _trim(c: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(c)
    return c[nz[0]:] if nz.size else np.zeros(1)


@dataclass(frozen=True, eq=False)
class TransferFunction:
    """Rational transfer function num(z)/den(z), coefficients in descending powers."""

    num: np.ndarray
    den: np.ndarray

    def __post_init__(self):
        num = _trim(np.atleast_1d(np.asarray(self.num, dtype=float)).ravel())
        den = _trim(np.atleast_1d(np.asarray(self.den, dtype=float)).ravel())
        if not np.all(np.isfinite(num)) or not np.all(np.isfinite(den)):
            raise ValueError("coefficients must be finite")
        if den[0] == 0.0:
            raise ValueError("denominator must be nonzero")
        object.__setattr__(self, "num", _frozen(num, 1))
        object.__setattr__(self, "den", _frozen(den, 1))

    @property
    def proper(self) -> bool:
        return self.is_zero or len(self.num) <= len(self.den)

    @property
    def is_zero(self) -> bool:
        return not np.any(self.num)

    @property
    def relative_degree(self) -> int:
        return len(self.den) - len(self.num)

    def __call__(self, z):
        return np.polyval(self.num, z) / np.polyval(self.den, z)

    def __mul__(self, other: TransferFunction | float) -> TransferFunction:
        if isinstance(other, TransferFunction):
            return TransferFunction(np.polymul(self.num, other.num), np.polymul(self.den, other.den))
        return TransferFunction(float(other) * self.num, self.den)

    __rmul__ = __mul__

    def __add__(self, other: TransferFunction | float) -> TransferFunction:
        if not isinstance(other, TransferFunction):
            other = TransferFunction([float(other)], [1.0])
        num = np.polyadd(np.polymul(self.num, other.den), np.polymul(other.num, self.den))
        return TransferFunction(num, np.polymul(self.den, other.den))

    __radd__ = __add__

    def __neg__(self) -> TransferFunction:
        return TransferFunction(-self.num, self.den)

    def __sub__(self, other: TransferFunction | float) -> TransferFunction:
        return self + (-other)

    def __rsub__(self, other: float) -> TransferFunction:
        return (-self) + other

    def impulse(self, n: int) -> np.ndarray:
        """First ``n`` Markov parameters obtained by long division in z^-1."""
        if not self.proper:
            raise NonCausalError("non-causal system")
        d = len(self.den)
        b = np.concatenate([np.zeros(d - len(self.num)), self.num])
        h = np.zeros(n)
        for k in range(n):
            acc = b[k] if k < d else 0.0
            for j in range(1, min(k, d - 1) + 1):
                acc -= self.den[j] * h[k - j]
            h[k] = acc / self.den[0]
        return h

    def to_dict(self) -> dict:
        return {"num": self.num.tolist(), "den": self.den.tolist()}


@dataclass(frozen=True, eq=False)
class StateSpace:
    """Realization x+ = A x + B u, y = C x + D u with initial state x0."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    x0: np.ndarray = field(default=None)

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        n = A.shape[0] if A.size else 0
        A = A.reshape(n, n)
        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        p, m = D.shape
        B = np.asarray(self.B, dtype=float).reshape(n, m) if n else np.zeros((0, m))
        C = np.asarray(self.C, dtype=float).reshape(p, n) if n else np.zeros((p, 0))
        x0 = np.zeros(n) if self.x0 is None else np.asarray(self.x0, dtype=float).ravel()
        if x0.shape != (n,):
            raise ValueError(f"x0 must have {n} entries, got {x0.shape}")
        for name, arr in zip("ABCD", (A, B, C, D)):
            object.__setattr__(self, name, _frozen(arr, 2))
        object.__setattr__(self, "x0", _frozen(x0, 1))

    @classmethod
    def static(cls, gain: float) -> StateSpace:
        return cls(np.zeros((0, 0)), np.zeros((0, 1)), np.zeros((1, 0)), [[gain]])

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.D.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.D.shape[0]

    def markov(self, n: int) -> np.ndarray:
        """Markov parameters D, CB, CAB, ... as an (n, p, m) array."""
        h = np.zeros((n,) + self.D.shape)
        if n == 0:
            return h
        h[0] = self.D
        v = self.B
        for k in range(1, n):
            h[k] = self.C @ v
            v = self.A @ v
        return h

    def freqresp(self, z: np.ndarray) -> np.ndarray:
        """SISO frequency response evaluated at the complex points ``z``."""
        z = np.asarray(z, dtype=complex)
        if self.n_states == 0:
            return np.full(z.shape, self.D[0, 0], dtype=complex)
        eye = np.eye(self.n_states)
        lhs = z.ravel()[:, None, None] * eye - self.A
        rhs = np.broadcast_to(self.B[:, :1].astype(complex), (z.size, self.n_states, 1))
        x = np.linalg.solve(lhs, rhs)[:, :, 0]
        return (x @ self.C[0] + self.D[0, 0]).reshape(z.shape)


@dataclass(frozen=True, eq=False)
class ToeplitzMatrix:
    """Square convolution matrix with constant diagonals.

    ``causal`` is ``"lower"`` for a causal operator and ``"upper"`` for an
    anticausal one. ``metadata`` records how the matrix was obtained.
    """

    entries: np.ndarray
    causal: str = LOWER
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.causal not in (LOWER, UPPER):
            raise ValueError(f"causal flag must be {LOWER!r} or {UPPER!r}")
        e = np.asarray(self.entries, dtype=float)
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise ValueError("Toeplitz matrix must be square")
        object.__setattr__(self, "entries", _frozen(e, 2))

    @property
    def N(self) -> int:
        return self.entries.shape[0]

    def __matmul__(self, other):
        return self.entries @ other

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.entries, dtype=dtype)


def lower_toeplitz(h: np.ndarray) -> np.ndarray:
    """Lower-triangular Toeplitz matrix with first column ``h``."""
    h = np.asarray(h, dtype=float)
    return scipy.linalg.toeplitz(h, np.zeros_like(h))


def upper_toeplitz(g: np.ndarray) -> np.ndarray:
    """Upper-triangular Toeplitz matrix with first row ``g``."""
    g = np.asarray(g, dtype=float)
    return scipy.linalg.toeplitz(np.concatenate([g[:1], np.zeros(len(g) - 1)]), g)


def as_ss(sys: TransferFunction | StateSpace) -> StateSpace:
    return tf_to_ss(sys) if isinstance(sys, TransferFunction) else sys


def tf_to_ss(tf: TransferFunction) -> StateSpace:
    """Controllable canonical realization of a proper transfer function."""
    if not tf.proper:
        raise NonCausalError("non-causal system")
    den = tf.den / tf.den[0]
    n = len(den) - 1
    num = np.concatenate([np.zeros(n + 1 - len(tf.num)), tf.num]) / tf.den[0]
    if n == 0:
        return StateSpace.static(num[0])
    d = num[0]
    c = num[1:] - d * den[1:]
    A = np.zeros((n, n))
    A[0] = -den[1:]
    A[1:, :-1] = np.eye(n - 1)
    B = np.zeros((n, 1))
    B[0, 0] = 1.0
    return StateSpace(A, B, c[None, :], [[d]])


def ss_to_tf(ss: StateSpace) -> TransferFunction:
    """Transfer function of a SISO realization (characteristic-polynomial form)."""
    if ss.n_states == 0:
        return TransferFunction([ss.D[0, 0]], [1.0])
    den = np.poly(ss.A)
    # num(z) = det(zI - A + B C) - det(zI - A) + D det(zI - A)
    num = np.poly(ss.A - ss.B @ ss.C) - den + ss.D[0, 0] * den
    return TransferFunction(num, den)


def simulate(ss: StateSpace, u: np.ndarray, x0: np.ndarray | None = None) -> np.ndarray:
    """Drive ``ss`` with ``u`` (length N, or N x m) and return the outputs.

    SISO systems return an N-vector, others an N x p array.
    """
    u = np.asarray(u, dtype=float)
    siso = u.ndim == 1
    u2 = u.reshape(len(u), -1)
    if u2.shape[0] < 1:
        raise ValueError("input must have at least one sample")
    if u2.shape[1] != ss.n_inputs:
        raise ValueError(f"input has {u2.shape[1]} channels, system expects {ss.n_inputs}")
    x = ss.x0.copy() if x0 is None else np.asarray(x0, dtype=float).ravel().copy()
    if x.shape != (ss.n_states,):
        raise ValueError(f"x0 must have {ss.n_states} entries")
    y = np.empty((u2.shape[0], ss.n_outputs))
    A, B, C, D = ss.A, ss.B, ss.C, ss.D
    for t, ut in enumerate(u2):
        y[t] = C @ x + D @ ut
        x = A @ x + B @ ut
    return y[:, 0] if siso and ss.n_outputs == 1 else y


def toeplitz(sys: StateSpace | TransferFunction, N: int) -> ToeplitzMatrix:
    """Lower-triangular N x N convolution matrix of a SISO system."""
    if isinstance(sys, TransferFunction):
        h = sys.impulse(N)
    else:
        if sys.D.shape != (1, 1):
            raise ValueError("toeplitz requires a SISO realization")
        h = sys.markov(N)[:, 0, 0]
    return ToeplitzMatrix(lower_toeplitz(h), LOWER)


def observability(ss: StateSpace, N: int) -> np.ndarray:
    """Stacked [C; CA; ...; CA^N]."""
    blocks = [ss.C]
    for _ in range(N):
        blocks.append(blocks[-1] @ ss.A)
    return np.vstack(blocks)


def _series_inverse(tf: TransferFunction, N: int) -> np.ndarray:
    """Taylor coefficients of den(z)/num(z) about z = 0 (powers of the advance z)."""
    n = tf.num[::-1]
    d = tf.den[::-1]
    g = np.zeros(N)
    for k in range(N):
        acc = d[k] if k < len(d) else 0.0
        for j in range(1, min(k, len(n) - 1) + 1):
            acc -= n[j] * g[k - j]
        g[k] = acc / n[0]
    return g


def invert_reference(
    mr: StateSpace | TransferFunction, N: int, allow_pinv: bool = False
) -> ToeplitzMatrix:
    """Convolution matrix of M_r^{-1} under zero initial and final conditions.

    Routes, tried in order and recorded in ``metadata["method"]``:

    ``"causal"``
        D nonzero: the causal inverse realization (A - B C / D, ...).
    ``"state_space"``
        A and F = C A^{-1} B invertible: the anticausal realization
        (A^{-1}(I - B F^{-1} C A^{-1}), -A^{-1} B F^{-1}, -F^{-1} C A^{-1}, -F^{-1}).
    ``"series"``
        M_r has no zero at the origin: the anticausal power series of
        M_r^{-1} in the advance operator. This covers reference models with a
        pole at z = 0, for which A is singular.
    ``"pseudoinverse"``
        Only with ``allow_pinv=True``: pinv of the causal convolution matrix.

    Raises InversionError when no exact route applies and ``allow_pinv`` is false.
    """
    ss = as_ss(mr)
    tf = mr if isinstance(mr, TransferFunction) else ss_to_tf(ss)
    if ss.D.shape != (1, 1):
        raise ValueError("invert_reference requires a SISO model")
    d = ss.D[0, 0]
    if d != 0.0:
        Ai = ss.A - ss.B @ ss.C / d
        inv = StateSpace(Ai, ss.B / d, -ss.C / d, [[1.0 / d]])
        h = inv.markov(N)[:, 0, 0]
        return ToeplitzMatrix(lower_toeplitz(h), LOWER, {"method": "causal"})
    n = ss.n_states
    if n and np.linalg.cond(ss.A) < 1e12:
        Ainv = np.linalg.inv(ss.A)
        F = ss.C @ Ainv @ ss.B
        if abs(F[0, 0]) > 1e-12 * max(1.0, np.abs(ss.C).max() * np.abs(ss.B).max()):
            Fi = 1.0 / F[0, 0]
            Ab = Ainv @ (np.eye(n) - Fi * ss.B @ ss.C @ Ainv)
            Bb = -Fi * Ainv @ ss.B
            Cb = -Fi * ss.C @ Ainv
            g = StateSpace(Ab, Bb, Cb, [[-Fi]]).markov(N)[:, 0, 0]
            return ToeplitzMatrix(upper_toeplitz(g), UPPER, {"method": "state_space"})
    if tf.num[-1] != 0.0:
        g = _series_inverse(tf, N)
        return ToeplitzMatrix(upper_toeplitz(g), UPPER, {"method": "series"})
    if not allow_pinv:
        raise InversionError("inversion formula inapplicable")
    pinv = np.linalg.pinv(toeplitz(ss, N).entries)
    # pinv of a triangular Toeplitz matrix is generally not Toeplitz; flagged as such
    return ToeplitzMatrix(pinv, UPPER, {"method": "pseudoinverse", "flagged": True})


def closed_loop(g: StateSpace | TransferFunction, k: StateSpace | TransferFunction) -> StateSpace:
    """Unity negative feedback y = G u, u = K (r - y), as a map r -> y.

    The state is (x_G, x_K); no cancellation is performed.
    """
    g, k = as_ss(g), as_ss(k)
    if g.D.shape != (1, 1) or k.D.shape != (1, 1):
        raise ValueError("closed_loop requires SISO systems")
    dg, dk = g.D[0, 0], k.D[0, 0]
    s = 1.0 + dg * dk
    if abs(s) < 1e-14:
        raise ValueError("algebraic loop is ill-posed (1 + D_G D_K = 0)")
    ng, nk = g.n_states, k.n_states
    # y = (C_g x_g + D_g C_k x_k + D_g D_k r) / s ; u = C_k x_k + D_k (r - y)
    cy = np.hstack([g.C, dg * k.C]) / s
    dy = dg * dk / s
    cu = np.hstack([np.zeros((1, ng)), k.C]) - dk * cy
    du = dk * (1.0 - dy)
    A = np.zeros((ng + nk, ng + nk))
    A[:ng] = np.hstack([g.A, np.zeros((ng, nk))]) + g.B @ cu
    A[ng:] = np.hstack([np.zeros((nk, ng)), k.A]) - k.B @ cy
    B = np.vstack([g.B * du, k.B * (1.0 - dy)])
    return StateSpace(A, B, cy, [[dy]])


def spectral_radius(A: np.ndarray) -> float:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        return 0.0
    if A.shape[0] != A.shape[1]:
        raise ValueError("spectral radius needs a square matrix")
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def is_unstable(A: np.ndarray) -> bool:
    return spectral_radius(A) >= UNSTABLE_RADIUS


def h2_mismatch(
    g: StateSpace | TransferFunction,
    k: StateSpace | TransferFunction,
    mr: TransferFunction,
    grid: int = 4096,
) -> float:
    """(1/2pi) * integral over [-pi, pi] of |M_r - GK/(1+GK)|^2, trapezoid rule."""
    cl = closed_loop(g, k)
    if is_unstable(cl.A):
        raise UnstableLoopError("H2 undefined: closed loop is unstable")
    w = np.linspace(-np.pi, np.pi, grid)
    z = np.exp(1j * w)
    err = np.abs(mr(z) - cl.freqresp(z)) ** 2
    return float(trapezoid(err, w) / (2.0 * np.pi))


def filter_signal(l: StateSpace | TransferFunction, x: np.ndarray) -> np.ndarray:
    """Zero-initial-condition filtering of a SISO signal."""
    return simulate(as_ss(l), np.asarray(x, dtype=float), np.zeros(as_ss(l).n_states))


def filter_dataset(d, l: StateSpace | TransferFunction):
    """Apply the prefilter ``l`` to both channels of a dataset."""
    return type(d)(filter_signal(l, d.u), filter_signal(l, d.y))


def system_from_dict(desc: dict) -> TransferFunction | StateSpace:
    """Build a system from ``{"num", "den"}`` or ``{"A", "B", "C", "D"}`` entries."""
    if "num" in desc and "den" in desc:
        return TransferFunction(desc["num"], desc["den"])
    if all(key in desc for key in "ABCD"):
        return StateSpace(desc["A"], desc["B"], desc["C"], desc["D"], desc.get("x0"))
    raise ValueError("system needs either num/den or A/B/C/D entries")


def system_to_dict(sys: TransferFunction | StateSpace) -> dict:
    if isinstance(sys, TransferFunction):
        return sys.to_dict()
    return {k: getattr(sys, k).tolist() for k in ("A", "B", "C", "D", "x0")}


def load_system(path: str | Path) -> TransferFunction | StateSpace:
    return system_from_dict(json.loads(Path(path).read_text()))
