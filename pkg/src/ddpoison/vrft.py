"""Virtual-reference controller tuning on a linearly parametrized basis.

The regressor for a record (u, y) is built from the virtual error
e = (M_r^{-1} - 1) y filtered through each basis element, and the controller
parameters are the least-squares fit of u on those regressors.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.signal

from .lti import StateSpace, TransferFunction, as_ss, invert_reference, tf_to_ss

#: Relative threshold on the eigenvalues of Phi^T Phi below which a fit is refused.
EXCITATION_RTOL = 1e-10


class VrftError(ValueError):
    """Raised when the regressor matrix is numerically rank deficient."""


@dataclass(frozen=True, eq=False)
class Dataset:
    """Input/output record of a single-input single-output experiment."""

    u: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        u = np.array(self.u, dtype=float).ravel()
        y = np.array(self.y, dtype=float).ravel()
        if u.shape != y.shape:
            raise ValueError(f"u and y lengths differ ({u.size} vs {y.size})")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(y))):
            raise ValueError("dataset entries must be finite")
        u.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "y", y)

    @property
    def N(self) -> int:
        return self.u.size


@dataclass(frozen=True, eq=False)
class ControllerBasis:
    """Controller K_theta(z) = sum_i theta_i * beta_i(z)."""

    beta: tuple[TransferFunction, ...]

    def __post_init__(self):
        beta = tuple(self.beta)
        if not beta:
            raise ValueError("basis needs at least one element")
        for b in beta:
            if not b.proper:
                raise ValueError("basis elements must be proper")
        object.__setattr__(self, "beta", beta)

    @property
    def n_k(self) -> int:
        return len(self.beta)


@dataclass(frozen=True, eq=False)
class VrftProblem:
    """Reference model, prefilter and basis, plus the clean record being tuned on.

    The regressor operators only depend on the record length, so they are
    built once per length and cached. The cache never holds data-dependent
    entries, which lets ``with_dataset`` share it.
    """

    dataset: Dataset | None
    mr: TransferFunction
    filter: TransferFunction
    basis: ControllerBasis
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_k(self) -> int:
        return self.basis.n_k

    def with_dataset(self, dataset: Dataset | None) -> VrftProblem:
        """Same model and basis on another record; the operator cache is shared."""
        return replace(self, dataset=dataset)

    def virtual_operator(self, N: int) -> np.ndarray:
        """V = T_{M_r^{-1}} - I, mapping an output record to its virtual error."""
        key = ("V", N)
        if key not in self._cache:
            tinv = invert_reference(self.mr, N)
            V = tinv.entries - np.eye(N)
            V.setflags(write=False)
            self._cache[key] = V
            self._cache[("method", N)] = tinv.metadata.get("method")
        return self._cache[key]

    def operators(self, N: int) -> np.ndarray:
        """Stacked operators T_i = T_{beta_i}(T_{M_r^{-1}} - I) as an (n_k, N, N) array."""
        key = ("T", N)
        if key not in self._cache:
            V = self.virtual_operator(N)
            blocks = np.stack([_lfilter_tf(b, V) for b in self.basis.beta])
            blocks.setflags(write=False)
            self._cache[key] = blocks
        return self._cache[key]

    def inversion_method(self, N: int) -> str:
        self.virtual_operator(N)
        return self._cache[("method", N)]

    def basis_filter(self, x: np.ndarray) -> np.ndarray:
        """Columns beta_i(z) x for a signal x (N,) -> (N, n_k).

        One recursive pass through the common denominator, then every
        numerator applied as a short FIR to the delayed copies.
        """
        den, nums = self._common_basis()
        w = scipy.signal.lfilter([1.0], den, np.asarray(x, dtype=float))
        d = len(den)
        delayed = np.zeros((w.size, d))
        for j in range(d):
            delayed[j:, j] = w[: w.size - j]
        return delayed @ nums.T

    def combined_filter_adjoint(self, coef: np.ndarray, x: np.ndarray) -> np.ndarray:
        """(sum_i coef_i T_{beta_i})^T x, one anticausal pass by time reversal."""
        den, nums = self._common_basis()
        return scipy.signal.lfilter(np.asarray(coef, dtype=float) @ nums, den, np.asarray(x, dtype=float)[::-1])[::-1]

    def _common_basis(self) -> tuple[np.ndarray, np.ndarray]:
        """Monic common denominator and the (n_k, deg+1) numerators over it, in powers of z^-1."""
        key = ("common_basis",)
        if key not in self._cache:
            dens = [b.den / b.den[0] for b in self.basis.beta]
            den = common_denominator(dens)
            rows = []
            for b, bd in zip(self.basis.beta, dens):
                q, _ = np.polydiv(den, bd)
                num = np.polymul(b.num / b.den[0], q)
                rows.append(np.concatenate([np.zeros(len(den) - len(num)), num]))
            self._cache[key] = (den, np.array(rows))
        return self._cache[key]

    def basis_filter_adjoint(self, R: np.ndarray) -> np.ndarray:
        """Columns T_{beta_i}^T R[:, i] (anticausal, via time reversal)."""
        R = np.asarray(R, dtype=float)
        out = [_lfilter_tf(b, R[::-1, i])[::-1] for i, b in enumerate(self.basis.beta)]
        return np.column_stack(out)


def _lfilter_tf(tf: TransferFunction, x: np.ndarray) -> np.ndarray:
    """Zero-initial-condition filtering of the columns of ``x`` through ``tf``."""
    d = len(tf.den)
    b = np.concatenate([np.zeros(d - len(tf.num)), tf.num])
    return scipy.signal.lfilter(b, tf.den, x, axis=0)


def build_phi(y: np.ndarray, p: VrftProblem) -> np.ndarray:
    """Regressor matrix Phi(y), N x n_k.

    The virtual error e = (T_{M_r^{-1}} - I) y is formed once and filtered
    through each basis element; this equals T @ diag_op(y, n_k).
    """
    y = np.asarray(y, dtype=float)
    return p.basis_filter(p.virtual_operator(y.size) @ y)


def check_excitation(phi: np.ndarray) -> np.ndarray:
    """Singular values of Phi; raises VrftError when Phi^T Phi is near singular."""
    s = np.linalg.svd(phi, compute_uv=False)
    if s.size == 0 or s[0] == 0.0 or s[-1] ** 2 <= EXCITATION_RTOL * s[0] ** 2:
        raise VrftError("data not sufficiently exciting")
    return s


def fit_phi(phi: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Least-squares parameters for a given regressor (QR, no normal equations)."""
    check_excitation(phi)
    q, r = np.linalg.qr(phi)
    return np.linalg.solve(r, q.T @ u)


def vrft_fit(u: np.ndarray, y: np.ndarray, p: VrftProblem) -> np.ndarray:
    """Least-squares controller parameters for the record (u, y)."""
    u = np.asarray(u, dtype=float)
    if u.shape != np.shape(y):
        raise ValueError("u and y lengths differ")
    return fit_phi(build_phi(y, p), u)


def learner_loss(u: np.ndarray, y: np.ndarray, theta: np.ndarray, p: VrftProblem) -> float:
    """(1/N) * ||u - Phi(y) theta||^2."""
    u = np.asarray(u, dtype=float)
    r = u - build_phi(y, p) @ np.asarray(theta, dtype=float)
    return float(r @ r / u.size)


def _cluster_roots(roots: np.ndarray, tol: float) -> list[tuple[complex, int]]:
    clusters: list[list] = []
    for r in sorted(roots, key=lambda c: (c.real, c.imag)):
        for c in clusters:
            if abs(r - c[0]) <= tol * max(1.0, abs(c[0])):
                c[1] += 1
                break
        else:
            clusters.append([r, 1])
    return [(c[0], c[1]) for c in clusters]


def common_denominator(dens: Sequence[np.ndarray], tol: float = 1e-6) -> np.ndarray:
    """Monic least common multiple of denominators, matched on their roots."""
    merged: list[list] = []
    for den in dens:
        for root, mult in _cluster_roots(np.roots(den), tol):
            for entry in merged:
                if abs(root - entry[0]) <= tol * max(1.0, abs(entry[0])):
                    entry[1] = max(entry[1], mult)
                    break
            else:
                merged.append([root, mult])
    roots = [r for r, m in merged for _ in range(m)]
    return np.real(np.poly(roots)) if roots else np.ones(1)


def controller_tf(theta: np.ndarray, basis: ControllerBasis) -> TransferFunction:
    """sum_i theta_i beta_i over the common denominator of the active terms."""
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.size != basis.n_k:
        raise ValueError(f"theta has {theta.size} entries, basis has {basis.n_k}")
    active = [(t, b) for t, b in zip(theta, basis.beta) if t != 0.0]
    if not active:
        return TransferFunction([0.0], [1.0])
    den = common_denominator([b.den for _, b in active])
    num = np.zeros(1)
    for t, b in active:
        q, _ = np.polydiv(den, b.den / b.den[0])
        num = np.polyadd(num, t * np.polymul(b.num / b.den[0], q))
    return TransferFunction(num, den)


def controller_ss(theta: np.ndarray, basis: ControllerBasis) -> StateSpace:
    return tf_to_ss(controller_tf(theta, basis))


def read_dataset_csv(path: str | Path) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != ["u", "y"]:
            raise ValueError(f"expected header 'u,y', got {header}")
        rows = [(float(a), float(b)) for a, b in reader]
    arr = np.array(rows, dtype=float).reshape(-1, 2)
    return Dataset(arr[:, 0], arr[:, 1])


def write_dataset_csv(d: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["u", "y"])
        for a, b in zip(d.u, d.y):
            w.writerow([format(a, ".17g"), format(b, ".17g")])


__all__ = [
    "ControllerBasis",
    "Dataset",
    "VrftError",
    "VrftProblem",
    "build_phi",
    "controller_ss",
    "controller_tf",
    "fit_phi",
    "learner_loss",
    "read_dataset_csv",
    "vrft_fit",
    "write_dataset_csv",
]
