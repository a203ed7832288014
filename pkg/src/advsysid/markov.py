"""Markov parameter matrices and the regression data they are fitted to.

Regressors are stacked newest first: ``U_t = [u_t; u_{t-1}; ...; u_{t-k+1}]``,
so that ``y_t = G* U_t + v_t + C A^{k-1} x_{t-k+1}`` with
``G* = [D, CB, CAB, ..., CA^{k-2}B]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MarkovMatrix:
    G: np.ndarray
    k: int

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        if G.shape[1] % self.k:
            raise ValueError(f"column count {G.shape[1]} is not a multiple of k={self.k}")
        object.__setattr__(self, "G", G)

    @property
    def r(self):
        return self.G.shape[0]

    @property
    def m(self):
        return self.G.shape[1] // self.k

    def block(self, i):
        """``i``-th r x m block: 0 is D, 1 is CB, 2 is CAB, ..."""
        m = self.m
        return self.G[:, i * m:(i + 1) * m]

    def blocks(self):
        return [self.block(i) for i in range(self.k)]


@dataclass(frozen=True)
class MarkovEstimate(MarkovMatrix):
    """An estimate of ``G*`` tagged with how it was produced.

    ``stationarity`` is the norm of the smoothed-objective gradient for batch
    solvers and NaN for streaming iterates.
    """
    method: str = ""
    T: int = 0
    t: int = -1
    stationarity: float = float("nan")
    converged: bool = True
    iterations: int = 0


@dataclass(frozen=True)
class RegressorDataset:
    targets: np.ndarray     # (T, r)
    regressors: np.ndarray  # (T, m*k)
    times: np.ndarray       # (T,)
    k: int

    @property
    def T(self):
        return self.targets.shape[0]

    @property
    def m(self):
        return self.regressors.shape[1] // self.k

    def head(self, T):
        """First ``T`` samples."""
        return RegressorDataset(self.targets[:T], self.regressors[:T], self.times[:T], self.k)


def true_markov(sys, k):
    if k < 1:
        raise ValueError("k must be at least 1")
    blocks = [sys.D]
    AkB = sys.B
    for _ in range(k - 1):
        blocks.append(sys.C @ AkB)
        AkB = sys.A @ AkB
    return MarkovMatrix(np.hstack(blocks), k)


def stack_inputs(inputs, k):
    """Rows ``U_t`` for ``t = k-1 .. N-1`` from an ``(N, m)`` input array."""
    inputs = np.asarray(inputs, dtype=float)
    N = inputs.shape[0]
    if N < k:
        raise ValueError(f"need at least k={k} inputs, got {N}")
    # column block j holds u_{t-j}
    return np.hstack([inputs[k - 1 - j:N - j] for j in range(k)])


def build_dataset(traj, k=None):
    k = traj.k if k is None else k
    if len(traj) < k:
        raise ValueError(f"trajectory of length {len(traj)} is shorter than k={k}")
    U = stack_inputs(traj.inputs, k)
    times = np.arange(k - 1, len(traj))
    return RegressorDataset(traj.observations[k - 1:].copy(), U, times, k)


def residual_v(sys, traj, t, k=None):
    """Attack contribution ``v_t = sum_{j=1}^{k-1} C A^{j-1} w_{t-j}``."""
    k = traj.k if k is None else k
    if t < k - 1 or t >= len(traj):
        raise IndexError(f"t={t} outside [{k - 1}, {len(traj) - 1}]")
    acc = np.zeros(sys.n)
    # Horner: A(...A(A w_{t-k+1} + w_{t-k+2})...) + w_{t-1}
    for j in range(k - 1, 0, -1):
        acc = sys.A @ acc + traj.attack_values[t - j]
    return sys.C @ acc


def state_tail(sys, traj, t, k=None):
    """``C A^{k-1} x_{t-k+1}``, the contribution of the state k-1 steps back."""
    k = traj.k if k is None else k
    x = traj.states[t - k + 1]
    for _ in range(k - 1):
        x = sys.A @ x
    return sys.C @ x


def estimation_error(G_hat, G_star, norm="frobenius"):
    Gh = G_hat.G if isinstance(G_hat, MarkovMatrix) else np.asarray(G_hat)
    Gs = G_star.G if isinstance(G_star, MarkovMatrix) else np.asarray(G_star)
    if Gh.shape != Gs.shape:
        raise ValueError(f"shape mismatch {Gh.shape} vs {Gs.shape}")
    diff = Gs - Gh
    if norm == "frobenius":
        return float(np.linalg.norm(diff))
    if norm == "spectral":
        return float(np.linalg.norm(diff, 2))
    raise ValueError(f"unknown norm {norm!r}")


def write_dataset_csv(data, path):
    r = data.targets.shape[1]
    mk = data.regressors.shape[1]
    m = mk // data.k
    cols = (["t"] + [f"y_{i + 1}" for i in range(r)]
            + [f"u_{j}_{i + 1}" for j in range(data.k) for i in range(m)])
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for t, y, U in zip(data.times, data.targets, data.regressors):
            fh.write(",".join([str(int(t))] + [repr(float(v)) for v in np.r_[y, U]]) + "\n")
