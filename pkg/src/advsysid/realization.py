"""Hankel matrices and Ho-Kalman balanced truncation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .markov import MarkovMatrix
from .simkit import verify_stability

SIGMA_FLOOR = 1e-10


class RankDeficiencyError(np.linalg.LinAlgError):
    def __init__(self, msg, singular_values):
        super().__init__(msg)
        self.singular_values = singular_values


@dataclass(frozen=True)
class BlockHankel:
    data: np.ndarray
    alpha: int
    beta: int
    r: int
    m: int

    def block(self, i, j):
        """Block (i, j), 0-indexed."""
        r, m = self.r, self.m
        return self.data[i * r:(i + 1) * r, j * m:(j + 1) * m]

    def is_hankel(self, atol=0.0):
        for s in range(2 * self.beta - 1):
            ref = None
            for i in range(max(0, s - self.beta + 1), min(s, self.beta - 1) + 1):
                b = self.block(i, s - i)
                if ref is None:
                    ref = b
                elif not np.allclose(b, ref, rtol=0, atol=atol):
                    return False
        return True


@dataclass(frozen=True)
class RealizedModel:
    A_d: np.ndarray
    B_d: np.ndarray
    C_d: np.ndarray
    D_hat: np.ndarray
    d: int
    singular_values: np.ndarray

    def markov(self, i):
        """``C_d A_d^i B_d``."""
        return self.C_d @ np.linalg.matrix_power(self.A_d, i) @ self.B_d


def hankel_from_markov(params, alpha, beta, r=None, m=None):
    """Block Hankel with block (i, j) (1-indexed) equal to ``params[alpha+i+j-2]``.

    ``params[0]`` is CB, ``params[1]`` is CAB, and so on.  Blocks past the end
    of ``params`` are zero.
    """
    if beta < 1:
        raise ValueError("beta must be at least 1")
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    params = [np.atleast_2d(np.asarray(P, dtype=float)) for P in params]
    if params:
        r, m = params[0].shape
    elif r is None or m is None:
        raise ValueError("block shape unknown for an empty parameter list")
    H = np.zeros((r * beta, m * beta))
    for i in range(beta):
        for j in range(beta):
            idx = alpha + i + j
            if idx < len(params):
                H[i * r:(i + 1) * r, j * m:(j + 1) * m] = params[idx]
    return BlockHankel(H, alpha, beta, r, m)


def system_markov_blocks(sys, count):
    """``[CB, CAB, ..., CA^{count-1}B]``."""
    out = []
    AkB = sys.B
    for _ in range(count):
        out.append(sys.C @ AkB)
        AkB = sys.A @ AkB
    return out


def hankel_tail_bound(sys, cert, d):
    """Bound on ``||H_{0,inf} - padded(H_{0,d})||_2`` from the stability constants."""
    rho, psi = cert.rho, cert.psi
    return float(np.sqrt(2) * psi ** 3 * rho ** d * np.linalg.norm(sys.C, 2)
                 * np.linalg.norm(sys.B, 2) / (1 - rho ** 2))


def hankel_true_truncated(sys, beta_big=None, trunc_tol=1e-12, cap=2000, cert=None):
    """``H_{0,beta_big}`` of the true system and the tail bound at ``beta_big``.

    Unless given, ``beta_big`` is the smallest block count with
    ``psi * rho**beta_big <= trunc_tol``, capped at ``cap``.
    """
    cert = cert or verify_stability(sys)
    if beta_big is None:
        if cert.psi * cert.rho <= trunc_tol:
            beta_big = 1
        else:
            beta_big = int(np.ceil(np.log(trunc_tol / cert.psi) / np.log(cert.rho)))
        beta_big = int(min(max(beta_big, 1), cap))
    H = hankel_from_markov(system_markov_blocks(sys, 2 * beta_big - 1), 0, beta_big)
    return H, hankel_tail_bound(sys, cert, beta_big)


def estimated_hankels(G_hat, beta=None):
    """``(H_{0,beta}, H_{1,beta})`` from the CB, CAB, ... blocks of an estimate.

    ``beta`` defaults to ``floor(k/2)``; blocks beyond ``CA^{k-2}B`` are zero.
    """
    k = G_hat.k
    beta = max(k // 2, 1) if beta is None else beta
    params = G_hat.blocks()[1:]
    r, m = G_hat.r, G_hat.m
    return (hankel_from_markov(params, 0, beta, r, m),
            hankel_from_markov(params, 1, beta, r, m))


def balanced_truncation(H0, H1, d, D_hat=None, sigma_floor=SIGMA_FLOOR):
    """Order-d balanced realization from ``H0 = H_{0,beta}`` and ``H1 = H_{1,beta}``.

    With ``H0 = U S V^T`` the model is ``C_d`` = first r rows of
    ``U_d S_d^{1/2}``, ``B_d`` = first m columns of ``S_d^{1/2} V_d^T`` and
    ``A_d = S_d^{-1/2} U_d^T H1 V_d S_d^{-1/2}``.
    """
    if d < 1:
        raise ValueError("d must be at least 1")
    if d > min(H0.data.shape):
        raise ValueError(f"d={d} exceeds Hankel size {H0.data.shape}")
    U, s, Vt = np.linalg.svd(H0.data)
    if s[d - 1] <= sigma_floor:
        raise RankDeficiencyError(f"sigma_{d} = {s[d - 1]:.3g} <= {sigma_floor:g}", s)
    sq = np.sqrt(s[:d])
    Ud, Vd = U[:, :d], Vt[:d].T
    C_d = (Ud * sq)[:H0.r]
    B_d = (sq[:, None] * Vt[:d])[:, :H0.m]
    A_d = (Ud / sq).T @ H1.data @ (Vd / sq)
    D_hat = np.zeros((H0.r, H0.m)) if D_hat is None else np.asarray(D_hat, dtype=float)
    return RealizedModel(A_d, B_d, C_d, D_hat, d, s)


def realize(G_hat, d, beta=None, sigma_floor=SIGMA_FLOOR):
    if not isinstance(G_hat, MarkovMatrix):
        raise TypeError("expected a MarkovMatrix")
    H0, H1 = estimated_hankels(G_hat, beta)
    return balanced_truncation(H0, H1, d, D_hat=G_hat.block(0), sigma_floor=sigma_floor)


def _pad(M, shape):
    out = np.zeros(shape)
    out[:M.shape[0], :M.shape[1]] = M
    return out


def hankel_error(H_ref, H_est):
    """Spectral norm of the difference after zero-padding the smaller matrix."""
    if (H_ref.r, H_ref.m) != (H_est.r, H_est.m):
        raise ValueError("block dimensions differ")
    shape = tuple(max(a, b) for a, b in zip(H_ref.data.shape, H_est.data.shape))
    return float(np.linalg.norm(_pad(H_ref.data, shape) - _pad(H_est.data, shape), 2))


def markov_match_error(model, sys, horizon):
    """``max_{0<=i<=horizon} ||C_d A_d^i B_d - C A^i B||_2``.

    Similarity invariant, unlike a direct comparison of (A, B, C).  The D
    error is reported by :func:`d_error`.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if model.d < 1:
        raise ValueError("model order must be at least 1")
    err = 0.0
    Xh, X = model.B_d, sys.B
    for _ in range(horizon + 1):
        err = max(err, float(np.linalg.norm(model.C_d @ Xh - sys.C @ X, 2)))
        Xh, X = model.A_d @ Xh, sys.A @ X
    return err


def d_error(model, sys):
    return float(np.linalg.norm(model.D_hat - sys.D, 2))


def write_hankel_csv(H, path):
    with open(path, "w") as fh:
        fh.write(f"# alpha={H.alpha} beta={H.beta} r={H.r} m={H.m}\n")
        for row in H.data:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def write_model_csv(model, path):
    """All four matrices in one file, each preceded by a ``# name rows cols`` line."""
    with open(path, "w") as fh:
        for name in ("A_d", "B_d", "C_d", "D_hat"):
            M = getattr(model, name)
            fh.write(f"# {name} {M.shape[0]} {M.shape[1]}\n")
            for row in M:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


def write_spectrum_csv(model, path):
    with open(path, "w") as fh:
        fh.write("index,singular_value\n")
        for i, s in enumerate(model.singular_values):
            fh.write(f"{i + 1},{float(s)!r}\n")
