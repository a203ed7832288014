"""Stochastic subgradient descent on the per-sample loss ``||y - G U||_2``.

One update is made every k time steps, using the sample that completes the
next non-overlapping regressor window.  Three step-size rules are available:

* ``best``      -- ``theta = <g, G - G*> / ||g||^2``; needs ``G*``.
* ``polyak``    -- ``theta = max((f(G) - f(G*)) / ||g||^2, 0)``; needs ``f(G*)``.
* ``projected`` -- ``gamma = k beta / (t + k)`` followed by projection on the
  Frobenius ball of radius R; needs no oracle.

With ``batch_size > 0`` the subgradient is averaged over samples drawn
without replacement from every sample seen so far.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

ZERO_RESIDUAL = 1e-12


class MissingOracleError(ValueError):
    pass


@dataclass(frozen=True)
class StepRule:
    variant: str = "projected"
    alpha: float = 1.0
    beta: float = 1.0
    R: float = 1.0
    gamma_choice: str = "mid"  # where gamma sits in [alpha*theta, (2-alpha)*theta]

    def __post_init__(self):
        if self.variant not in ("best", "polyak", "projected"):
            raise ValueError(f"unknown step rule {self.variant!r}")
        if self.variant in ("best", "polyak") and not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.variant == "projected" and (self.beta <= 0 or self.R <= 0):
            raise ValueError("projected rule needs beta > 0 and R > 0")
        if self.gamma_choice not in ("mid", "low", "high"):
            raise ValueError("gamma_choice must be 'mid', 'low' or 'high'")

    @property
    def needs_oracle(self):
        return self.variant != "projected"

    def scale(self, theta):
        if self.gamma_choice == "low":
            return self.alpha * theta
        if self.gamma_choice == "high":
            return (2.0 - self.alpha) * theta
        return theta


def beta_threshold(R, q, sigma):
    """Smallest beta for which the O(k/sqrt(t)) guarantee of the projected rule holds."""
    return np.sqrt(2 * np.pi) * R / ((1 - 2 * q) * sigma)


def check_beta(rule, q, sigma):
    thr = beta_threshold(rule.R, q, sigma)
    if rule.beta <= thr:
        warnings.warn(f"beta={rule.beta:.4g} is below the guarantee threshold {thr:.4g}",
                      stacklevel=2)
        return False
    return True


def radius_bound(D_fro, C_fro, B_fro, psi, k):
    """Upper bound on ``||G*||_F`` from bounds on ``||D||_F, ||C||_F, ||B||_F``.

    Uses ``||C A^j B||_F <= ||C||_F psi rho^j ||B||_F`` with ``rho < 1``.
    """
    return float(np.sqrt(D_fro ** 2 + psi ** 2 * (k - 1) * C_fro ** 2 * B_fro ** 2))


@dataclass(frozen=True)
class Window:
    """Samples newly observed between two updates; the last one drives the step."""
    ys: np.ndarray     # (w, r)
    Us: np.ndarray     # (w, mk)
    times: np.ndarray  # (w,)


@dataclass
class StreamState:
    G: np.ndarray
    t: int
    k: int
    rule: StepRule
    G_star: Optional[np.ndarray] = field(default=None, repr=False)
    batch_size: int = 0
    history_cap: Optional[int] = None
    hist_y: list = field(default_factory=list, repr=False)
    hist_U: list = field(default_factory=list, repr=False)
    rng: Optional[np.random.Generator] = field(default=None, repr=False)
    trace: list = field(default_factory=list, repr=False)
    zero_steps: int = 0

    @classmethod
    def start(cls, r, m, k, rule, G_star=None, batch_size=0, rng=None, history_cap=None):
        if rule.needs_oracle and G_star is None:
            raise MissingOracleError(f"step rule {rule.variant!r} needs G*")
        if batch_size and rng is None:
            rng = np.random.default_rng(0)
        G_star = None if G_star is None else np.asarray(G_star, dtype=float)
        st = cls(np.zeros((r, m * k)), 0, k, rule, G_star=G_star, batch_size=batch_size,
                 history_cap=history_cap, rng=rng)
        if G_star is not None:
            st.trace.append((0, float(np.linalg.norm(G_star))))
        return st

    @property
    def error(self):
        if self.G_star is None:
            return float("nan")
        return float(np.linalg.norm(self.G - self.G_star))


def loss(G, y, U):
    return float(np.linalg.norm(y - G @ U))


def subgradient(G, y, U):
    """Subgradient of ``||y - G U||_2`` at G.

    Returns ``(g, zero_residual)``; at a zero residual the zero matrix is
    returned and the caller skips the step.
    """
    rv = y - G @ U
    nr = np.linalg.norm(rv)
    if nr <= ZERO_RESIDUAL:
        return np.zeros_like(G), True
    return -np.outer(rv / nr, U), False


def _batch_loss(G, Y, U):
    return float(np.mean(np.linalg.norm(Y - U @ G.T, axis=1)))


def _batch_subgradient(G, Y, U):
    R = Y - U @ G.T
    nr = np.linalg.norm(R, axis=1)
    live = nr > ZERO_RESIDUAL
    if not np.any(live):
        return np.zeros_like(G), True
    # fixed summation order: rows in drawn order
    W = np.zeros_like(R)
    W[live] = R[live] / nr[live, None]
    g = -(W.T @ U) / len(nr)
    return g, not np.any(g)


def _apply(state, g, gamma, project=False):
    G = state.G - gamma * g
    if project:
        G = project_ball(G, state.rule.R)
    return replace(state, G=G, t=state.t + state.k)


def _theta_best(state, g):
    if state.G_star is None:
        raise MissingOracleError("best step size needs G*")
    return float(np.vdot(g, state.G - state.G_star) / np.vdot(g, g))


def step_best(state, y, U):
    g, zero = subgradient(state.G, y, U)
    if zero:
        return replace(state, t=state.t + state.k, zero_steps=state.zero_steps + 1)
    return _apply(state, g, state.rule.scale(_theta_best(state, g)))


def step_polyak(state, y, U, f_star):
    if f_star is None:
        raise MissingOracleError("Polyak step size needs f(G*)")
    g, zero = subgradient(state.G, y, U)
    if zero:
        return replace(state, t=state.t + state.k, zero_steps=state.zero_steps + 1)
    theta = max((loss(state.G, y, U) - f_star) / float(np.vdot(g, g)), 0.0)
    return _apply(state, g, state.rule.scale(theta))


def projected_step_size(rule, t, k):
    return k * rule.beta / (t + k)


def step_projected(state, y, U):
    g, zero = subgradient(state.G, y, U)
    if zero:
        return replace(state, G=project_ball(state.G, state.rule.R), t=state.t + state.k,
                       zero_steps=state.zero_steps + 1)
    return _apply(state, g, projected_step_size(state.rule, state.t, state.k), project=True)


def project_ball(G, R):
    if R <= 0:
        raise ValueError("R must be positive")
    nrm = np.linalg.norm(G)
    if nrm <= R:
        return G
    return G * (R / nrm)


def minibatch_indices(state, batch_size):
    n = len(state.hist_y)
    if n == 0:
        raise ValueError("empty history buffer")
    return state.rng.choice(n, size=min(n, batch_size), replace=False)


def minibatch_subgradient(state, batch_size):
    """Average subgradient over a uniform draw (without replacement) from history."""
    idx = minibatch_indices(state, batch_size)
    Y = np.asarray([state.hist_y[i] for i in idx])
    U = np.asarray([state.hist_U[i] for i in idx])
    return _batch_subgradient(state.G, Y, U)[0]


def _minibatch_step(state):
    idx = minibatch_indices(state, state.batch_size)
    Y = np.asarray([state.hist_y[i] for i in idx])
    U = np.asarray([state.hist_U[i] for i in idx])
    g, zero = _batch_subgradient(state.G, Y, U)
    rule = state.rule
    if zero:
        G = project_ball(state.G, rule.R) if rule.variant == "projected" else state.G
        return replace(state, G=G, t=state.t + state.k, zero_steps=state.zero_steps + 1)
    if rule.variant == "best":
        return _apply(state, g, rule.scale(_theta_best(state, g)))
    if rule.variant == "polyak":
        f_star = _batch_loss(state.G_star, Y, U)
        theta = max((_batch_loss(state.G, Y, U) - f_star) / float(np.vdot(g, g)), 0.0)
        return _apply(state, g, rule.scale(theta))
    return _apply(state, g, projected_step_size(rule, state.t, state.k), project=True)


def advance(state, window):
    """One update from time t to t + k."""
    k = state.k
    if window.times[-1] != state.t + k - 1:
        raise ValueError(f"window ends at {window.times[-1]}, expected {state.t + k - 1}")
    y, U = window.ys[-1], window.Us[-1]
    if state.batch_size:
        state.hist_y.extend(window.ys)
        state.hist_U.extend(window.Us)
        if state.history_cap is not None and len(state.hist_y) > state.history_cap:
            del state.hist_y[:-state.history_cap]
            del state.hist_U[:-state.history_cap]
        new = _minibatch_step(state)
    elif state.rule.variant == "best":
        new = step_best(state, y, U)
    elif state.rule.variant == "polyak":
        f_star = loss(state.G_star, y, U) if state.G_star is not None else None
        new = step_polyak(state, y, U, f_star)
    else:
        new = step_projected(state, y, U)
    if new.G_star is not None:
        new.trace.append((new.t, new.error))
    return new


def windows(data, t_max=None):
    """Yield ``(t, Window)`` for ``t = 0, k, 2k, ...`` over a regressor dataset.

    The window for t holds the samples at times ``max(k-1, t) .. t+k-1``.
    """
    k = data.k
    last = int(data.times[-1])
    t = 0
    while t + k - 1 <= last and (t_max is None or t < t_max):
        lo = max(0, t - k + 1)
        hi = t + 1
        yield t, Window(data.targets[lo:hi], data.regressors[lo:hi], data.times[lo:hi])
        t += k


def run_stream(data, rule, G_star=None, batch_size=0, rng=None, t_max=None,
               history_cap=None):
    """Run a full stream and return the list of states at ``t = 0, k, 2k, ...``."""
    st = StreamState.start(data.targets.shape[1], data.m, data.k, rule, G_star=G_star,
                           batch_size=batch_size, rng=rng, history_cap=history_cap)
    states = [st]
    for _, win in windows(data, t_max):
        st = advance(st, win)
        states.append(st)
    return states


def estimate_at(states, t):
    """Iterate in force at time t: the last update at or before t."""
    k = states[0].k
    i = min(t // k, len(states) - 1)
    return states[i].G


def write_checkpoints(states, path, every=1):
    with open(path, "w") as fh:
        fh.write("t,norm_fro,err_fro\n")
        for st in states[::every]:
            fh.write(f"{st.t},{np.linalg.norm(st.G)!r},{st.error!r}\n")
