"""Batch estimators of the Markov parameter matrix.

``l2_estimator`` minimizes ``sum_t ||y_t - G U_t||_2`` (one norm per sample),
``l1_estimator`` minimizes the entrywise absolute residual, and
``least_squares`` is the non-robust baseline.  The two nonsmooth programs are
solved by iteratively reweighted least squares on the smoothed objective
``sum_t sqrt(||r_t||^2 + eps)`` while ``eps`` is annealed towards zero.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg.lapack import dposv

from .markov import MarkovEstimate


class BatchSolverError(RuntimeError):
    pass


class AssumptionViolation(ValueError):
    pass


@dataclass(frozen=True)
class BatchOptions:
    method: str = "l2"
    smoothing_eps0: float = 1.0
    smoothing_decay: float = 0.1
    eps_min: float = 1e-12
    max_outer: int = 12
    max_inner: int = 500
    rel_tol: float = 1e-10
    grad_tol: float = 1e-7  # final-level gradient norm relative to sum_t ||U_t||

    def __post_init__(self):
        if self.method not in ("l2", "l1", "least_squares"):
            raise ValueError(f"unknown method {self.method!r}")
        if not 0 < self.smoothing_decay < 1:
            raise ValueError("smoothing_decay must lie in (0, 1)")
        if not 0 < self.eps_min <= self.smoothing_eps0:
            raise ValueError("need 0 < eps_min <= smoothing_eps0")
        if self.rel_tol <= 0 or self.max_outer < 1 or self.max_inner < 1:
            raise ValueError("tolerances and iteration caps must be positive")

    def eps_schedule(self):
        eps = [self.smoothing_eps0 * self.smoothing_decay ** j for j in range(self.max_outer)]
        eps = [max(e, self.eps_min) for e in eps]
        if eps[-1] > self.eps_min:
            eps.append(self.eps_min)
        return sorted(set(eps), reverse=True)


@dataclass(frozen=True)
class TheoryBounds:
    q: float
    nu: float
    rho: float
    k: int
    T_star_scale: float
    c_Tstar: float
    error_bound: float  # rho^{k-1} nu / (1 - rho), without the hidden constant


def _arrays(data):
    Y = np.asarray(data.targets, dtype=float)
    U = np.asarray(data.regressors, dtype=float)
    if Y.shape[0] == 0:
        raise ValueError("empty dataset")
    return Y, U


def least_squares(data):
    """Minimum-norm least-squares fit of ``Y ~ U G^T``."""
    Y, U = _arrays(data)
    X, _, rank, _ = np.linalg.lstsq(U, Y, rcond=None)
    if rank < U.shape[1]:
        warnings.warn(f"regressor matrix has rank {rank} < {U.shape[1]}; "
                      "returning the minimum-norm solution", stacklevel=2)
    return MarkovEstimate(X.T, data.k, method="least_squares", T=data.T,
                          stationarity=float(np.linalg.norm(U.T @ (U @ X - Y))))


def l2_objective(G, data):
    Y, U = _arrays(data)
    return float(np.sum(np.linalg.norm(Y - U @ np.asarray(G).T, axis=1)))


def l1_objective(G, data):
    Y, U = _arrays(data)
    return float(np.sum(np.abs(Y - U @ np.asarray(G).T)))


def _spd_solve(lhs, rhs):
    """Cholesky solve, falling back to least squares when lhs is not numerically PD."""
    _, x, info = dposv(lhs, rhs)
    if info == 0:
        return x
    return np.linalg.lstsq(lhs, rhs, rcond=None)[0]


def _wls(U, Y, w):
    """Solve ``min sum_t w_t ||y_t - G u_t||^2`` for G^T (shape mk x r)."""
    Uw = U * w[:, None]
    _, X, info = dposv(U.T @ Uw, Uw.T @ Y)
    if info == 0:
        return X
    sw = np.sqrt(w)[:, None]
    return np.linalg.lstsq(sw * U, sw * Y, rcond=None)[0]


def l2_smoothed_grad(U, R, eps):
    """Gradient (w.r.t. G) of ``sum_t sqrt(||r_t||^2 + eps)``."""
    w = 1.0 / np.sqrt(np.einsum("ij,ij->i", R, R) + eps)
    return -(R * w[:, None]).T @ U


def l1_smoothed_grad(U, R, eps):
    return -(R / np.sqrt(R * R + eps)).T @ U


def _l2_irls(U, Y, X, opts, gscale):
    iters = 0
    converged = False
    schedule = opts.eps_schedule()
    for eps in schedule:
        final = eps == schedule[-1]
        for _ in range(opts.max_inner):
            R = Y - U @ X
            w = 1.0 / np.sqrt(np.einsum("ij,ij->i", R, R) + eps)
            if not np.all(np.isfinite(w)):
                raise BatchSolverError("degenerate IRLS weights")
            X_new = _wls(U, Y, w)
            iters += 1
            small = np.linalg.norm(X_new - X) <= opts.rel_tol * max(np.linalg.norm(X_new), 1e-300)
            X = X_new
            if small and not final:
                break
            if final and np.linalg.norm(l2_smoothed_grad(U, Y - U @ X, eps)) <= opts.grad_tol * gscale:
                converged = True
                break
    return X, converged, iters


def _l1_row(U, y, x, opts, gscale):
    """Smoothed LAD for one output by Newton-reweighted least squares.

    Each step is a weighted least-squares solve with weights ``eps / s^3``
    (the curvature of ``sqrt(r^2 + eps)``), followed by backtracking.
    """
    iters = 0
    converged = False
    schedule = opts.eps_schedule()
    for eps in schedule:
        final = eps == schedule[-1]
        for _ in range(opts.max_inner):
            r = y - U @ x
            s = np.sqrt(r * r + eps)
            g = -U.T @ (r / s)
            if final and np.linalg.norm(g) <= opts.grad_tol * gscale:
                converged = True
                break
            c = eps / s ** 3
            d = _spd_solve((U * c[:, None]).T @ U, -g)
            f0 = s.sum()
            slope = g @ d
            a = 1.0
            while a > 1e-12:
                rn = r - a * (U @ d)
                if np.sqrt(rn * rn + eps).sum() <= f0 + 1e-4 * a * slope:
                    break
                a *= 0.5
            iters += 1
            x = x + a * d
            if a * np.linalg.norm(d) <= opts.rel_tol * max(np.linalg.norm(x), 1e-300) and not final:
                break
    return x, converged, iters


def l2_estimator(data, opts=None):
    """Sum-of-norms regression by annealed IRLS, started from least squares.

    Each inner step solves a weighted least-squares problem with per-sample
    weights ``1 / sqrt(||r_t||^2 + eps)``.  The returned estimate carries the
    norm of the smoothed gradient at the final smoothing level as
    ``stationarity``; ``converged`` is False when that gradient did not drop
    below ``grad_tol * sum_t ||U_t||`` within ``max_inner`` steps.
    """
    opts = opts or BatchOptions(method="l2")
    Y, U = _arrays(data)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        X0 = least_squares(data).G.T
    gscale = float(np.linalg.norm(U, axis=1).sum())
    X, conv, iters = _l2_irls(U, Y, X0, opts, gscale)
    stat = float(np.linalg.norm(l2_smoothed_grad(U, Y - U @ X, opts.eps_min)))
    return MarkovEstimate(X.T, data.k, method="l2", T=data.T, stationarity=stat,
                          converged=conv, iterations=iters)


def l1_estimator(data, opts=None):
    """Entrywise least-absolute-deviations fit, one independent problem per output."""
    opts = opts or BatchOptions(method="l1")
    Y, U = _arrays(data)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        X0 = least_squares(data).G.T
    gscale = float(np.linalg.norm(U, axis=1).sum())
    cols, conv, iters = [], True, 0
    for i in range(Y.shape[1]):
        x, ok, it = _l1_row(U, Y[:, i], X0[:, i], opts, gscale)
        cols.append(x)
        conv &= ok
        iters += it
    X = np.column_stack(cols)
    stat = float(np.linalg.norm(l1_smoothed_grad(U, Y - U @ X, opts.eps_min)))
    return MarkovEstimate(X.T, data.k, method="l1", T=data.T, stationarity=stat,
                          converged=conv, iterations=iters)


def estimate(data, opts):
    if opts.method == "least_squares":
        return least_squares(data)
    if opts.method == "l1":
        return l1_estimator(data, opts)
    return l2_estimator(data, opts)


def attack_window_prob(p, k):
    """``q = 1 - (1 - p)^{k-1}``: chance that the last k-1 steps saw an attack."""
    return -np.expm1((k - 1) * np.log1p(-p))


def theory_bounds(sys, cert, p, k, m, sigma, eta, delta=0.05, c_Tstar=1.0):
    """Scalings of the recovery time and error of the l2 estimator.

    Hidden constants are not known, so ``T_star_scale`` and ``error_bound``
    are orders of magnitude, not guarantees.
    """
    q = float(attack_window_prob(p, k))
    gap = 1.0 - 2.0 * q
    if gap <= 0:
        raise AssumptionViolation(f"1 - 2q = {gap:.4g} <= 0 (p={p}, k={k})")
    if not 0 < delta <= 1:
        raise ValueError("delta must lie in (0, 1]")
    normC = np.linalg.norm(sys.C, 2)
    normB = np.linalg.norm(sys.B, 2)
    nu = normC / gap * (eta / sigma + np.sqrt(m) * normB)
    mk = m * k
    T_scale = c_Tstar * k / gap ** 2 * (mk * np.log(mk / gap) + np.log(1.0 / delta))
    rho = cert.rho
    err = rho ** (k - 1) * nu / (1.0 - rho)
    return TheoryBounds(q=q, nu=float(nu), rho=float(rho), k=k, T_star_scale=float(T_scale),
                        c_Tstar=c_Tstar, error_bound=float(err))


def state_norm_bounds(sys, cert, sigma, eta, T):
    """Scalings of ``E||x_t||^2`` and ``sum_{t<T} ||x_t||`` (no hidden constants)."""
    s = (eta + sigma * np.sqrt(sys.m) * np.linalg.norm(sys.B, 2)) / (1.0 - cert.rho)
    return float(s ** 2), float(s * T)


def write_estimate_csv(est, path, seed=None):
    with open(path, "w") as fh:
        fh.write(f"# method={est.method} T={est.T} k={est.k} seed={seed} "
                 f"stationarity={est.stationarity!r}\n")
        for row in est.G:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_estimate_csv(path):
    with open(path) as fh:
        meta = dict(kv.split("=", 1) for kv in fh.readline().lstrip("# ").split())
        G = np.loadtxt(fh, delimiter=",", ndmin=2)
    return MarkovEstimate(G, int(meta["k"]), method=meta["method"], T=int(meta["T"]),
                          stationarity=float(meta["stationarity"]))
