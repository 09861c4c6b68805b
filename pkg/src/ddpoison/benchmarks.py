"""Benchmark systems and data generators used by the experiments."""
from __future__ import annotations

import numpy as np

from .lti import TransferFunction, filter_signal, tf_to_ss
from .vrft import ControllerBasis, Dataset, VrftProblem

FLEX_TS = 0.05
FLEX_PLANT = TransferFunction([0.28261, 0.50666], [1.0, -1.41833, 1.58939, -1.31608, 0.88642])
#: Nominal controller parameters reported for the flexible transmission problem.
FLEX_THETA0 = np.array([0.33, -0.61, 0.72, -0.66, 0.48, -0.13])

BATCH_TS = 0.1
BATCH_A = np.array([
    [1.178, 0.001, 0.511, -0.403],
    [-0.051, 0.661, -0.011, 0.061],
    [0.076, 0.335, 0.560, 0.382],
    [0.0, 0.335, 0.089, 0.849],
])
BATCH_B = np.array([
    [0.004, -0.087],
    [0.467, 0.001],
    [0.213, -0.235],
    [0.213, -0.016],
])


def flex_reference_model(omega: float = 10.0, ts: float = FLEX_TS) -> TransferFunction:
    """Third-order reference (1-a)^2 / (z (z-a)^2) with a = exp(-ts * omega)."""
    a = np.exp(-ts * omega)
    return TransferFunction([(1.0 - a) ** 2], np.polymul([1.0, 0.0], [1.0, -2.0 * a, a * a]))


def flex_filter(mr: TransferFunction | None = None) -> TransferFunction:
    """Prefilter (1 - M_r) M_r."""
    mr = flex_reference_model() if mr is None else mr
    return (1.0 - mr) * mr


def flex_basis(n_k: int = 6) -> ControllerBasis:
    """Basis beta_i = z^(2-i) / (z - 1), i = 1..n_k."""
    beta = [TransferFunction([1.0, 0.0], [1.0, -1.0])]
    for i in range(2, n_k + 1):
        beta.append(TransferFunction([1.0], np.concatenate([[1.0, -1.0], np.zeros(i - 2)])))
    return ControllerBasis(tuple(beta))


def step_input(N: int = 512, start: int = 5, stop: int = 15, level: float = 1.0) -> np.ndarray:
    u = np.zeros(N)
    u[start:stop + 1] = level
    return u


def flex_dataset(u: np.ndarray, prefilter: bool = True) -> Dataset:
    """Noise-free plant record for input ``u``, optionally prefiltered."""
    y = filter_signal(FLEX_PLANT, u)
    d = Dataset(u, y)
    if prefilter:
        L = tf_to_ss(flex_filter())
        d = Dataset(filter_signal(L, d.u), filter_signal(L, d.y))
    return d


def flex_problem(dataset: Dataset | None = None) -> VrftProblem:
    mr = flex_reference_model()
    return VrftProblem(dataset, mr, flex_filter(mr), flex_basis())


def batch_reactor_data(N: int, rng: np.random.Generator, x0_scale: float = 0.0):
    """White-noise driven batch-reactor states and inputs (rows are samples)."""
    from .willems import StateDataset, simulate_states

    U = rng.standard_normal((N, BATCH_B.shape[1]))
    x0 = x0_scale * rng.standard_normal(BATCH_A.shape[0])
    return StateDataset(simulate_states(BATCH_A, BATCH_B, U, x0), U)
