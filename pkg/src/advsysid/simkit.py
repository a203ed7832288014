"""Simulation of LTI systems driven by Gaussian inputs and sparse adversarial attacks.

The dynamics are

    x_{t+1} = A x_t + B u_t + w_t
    y_t     = C x_t + D u_t

with no observation noise.  ``w_t`` is nonzero only at Bernoulli(p) times.

Random numbers come from numpy's ``Generator`` on the PCG64 bit generator;
Gaussian variates use numpy's ziggurat sampler.  Per-replicate streams are
derived from ``(master_seed, replicate_index)`` with :func:`replicate_seed`.
"""
from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

TRAJ_HEADER = "advsysid-traj v1"
OVERFLOW_LIMIT = 1e300
RHO_FLOOR = 1e-12


class SimulationError(RuntimeError):
    """State blew up during simulation."""

    def __init__(self, msg, step):
        super().__init__(msg)
        self.step = step


class InstabilityError(ValueError):
    pass


class PowerIterationError(RuntimeError):
    """Power iteration hit its iteration cap."""

    def __init__(self, msg, vector, residual):
        super().__init__(msg)
        self.vector = vector
        self.residual = residual


def make_rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


def replicate_seed(master_seed: int, index: int) -> int:
    """Deterministic 63-bit seed for replicate ``index`` of ``master_seed``.

    Independent of the order or process in which replicates are run.
    """
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True)
class SystemModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A, B, C, D = (np.atleast_2d(np.asarray(M, dtype=float)) for M in
                      (self.A, self.B, self.C, self.D))
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        if B.shape[0] != n:
            raise ValueError(f"B must have {n} rows, got {B.shape}")
        if C.shape[1] != n:
            raise ValueError(f"C must have {n} columns, got {C.shape}")
        if D.shape != (C.shape[0], B.shape[1]):
            raise ValueError(f"D must be {C.shape[0]}x{B.shape[1]}, got {D.shape}")
        for name, M in zip("ABCD", (A, B, C, D)):
            M.setflags(write=False)
            object.__setattr__(self, name, M)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def r(self):
        return self.C.shape[0]


@dataclass(frozen=True)
class StabilityCert:
    """Constants with ``||A^t||_2 <= psi * rho**t``."""
    psi: float
    rho: float
    t_check: int


@dataclass(frozen=True)
class AttackModel:
    """Sparse attack generator.

    variant is one of ``"none"``, ``"iid_gaussian"``, ``"sign_adaptive"`` or
    ``"custom"``.  For ``sign_adaptive`` the mean of coordinate i is ``high``
    when ``x_i >= 0`` and ``low`` otherwise; ``nonneg_gets_high=False`` swaps
    the two.  ``callback(x_t, rng)`` is used for ``custom``.
    """
    variant: str = "none"
    p: float = 0.0
    mean: Optional[np.ndarray] = None
    cov_scale: float = 0.0
    low: float = 0.0
    high: float = 0.0
    nonneg_gets_high: bool = True
    callback: Optional[Callable] = None

    def __post_init__(self):
        if self.variant not in ("none", "iid_gaussian", "sign_adaptive", "custom"):
            raise ValueError(f"unknown attack variant {self.variant!r}")
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"attack probability must lie in [0, 1), got {self.p}")
        if self.cov_scale < 0:
            raise ValueError("cov_scale must be nonnegative")
        if self.variant == "custom" and self.callback is None:
            raise ValueError("custom attack requires a callback")
        if self.variant == "none" and self.p != 0.0:
            object.__setattr__(self, "p", 0.0)

    def check_order(self, k):
        """Warn when p >= 1/(2(k-1)), where the robust-recovery guarantee lapses."""
        if k > 1 and self.p >= 1.0 / (2 * (k - 1)):
            warnings.warn(f"attack probability {self.p} >= 1/(2(k-1)) = "
                          f"{1.0 / (2 * (k - 1)):.4g}; recovery guarantees do not apply",
                          stacklevel=2)
            return False
        return True

    def norm_scale(self, n):
        """Rough sub-Gaussian scale of ``||w_t||_2`` used as a default eta."""
        if self.variant == "iid_gaussian":
            mu = 0.0 if self.mean is None else float(np.linalg.norm(self.mean))
            return mu + np.sqrt(self.cov_scale * n)
        if self.variant == "sign_adaptive":
            return np.sqrt(n) * max(abs(self.low), abs(self.high)) + np.sqrt(self.cov_scale * n)
        return 1.0


@dataclass
class Trajectory:
    """Inputs ``u_0..u_{N-1}`` with matching states, observations and attacks.

    Arrays are time-major: ``inputs`` is ``(N, m)``, ``states`` ``(N, n)`` etc.
    """
    inputs: np.ndarray
    states: np.ndarray
    observations: np.ndarray
    attack_flags: np.ndarray
    attack_values: np.ndarray
    input_std: float
    k: int
    final_state: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def T(self):
        """Number of regressor samples, ``len(inputs) - k + 1``."""
        return len(self) - self.k + 1


def spectral_norm(M, rtol=1e-12, max_iter=10_000):
    """Largest singular value of ``M`` by power iteration on ``M^T M``.

    Starts from the normalized all-ones vector, so results are deterministic.
    Raises :class:`PowerIterationError` if the relative change of the
    eigenvalue estimate has not dropped below ``rtol`` within ``max_iter``.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        raise ValueError("spectral_norm of an empty matrix")
    # iterate on the smaller Gram matrix
    G = M.T @ M if M.shape[1] <= M.shape[0] else M @ M.T
    v = np.ones(G.shape[0]) / np.sqrt(G.shape[0])
    lam = 0.0
    resid = np.inf
    for _ in range(max_iter):
        w = G @ v
        lam_new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        resid = np.linalg.norm(w - lam_new * v) / max(abs(lam_new), np.finfo(float).tiny)
        v = w / nw
        if abs(lam_new - lam) <= rtol * abs(lam_new):
            return float(np.sqrt(max(lam_new, 0.0)))
        lam = lam_new
    raise PowerIterationError(f"power iteration did not converge in {max_iter} steps",
                              v, resid)


def gen_system(n, m, r, target_spec_norm, rng):
    """Random system with Uniform[-1, 1] entries and ``||A||_2 = target_spec_norm``."""
    if min(n, m, r) < 1:
        raise ValueError(f"dimensions must be positive, got n={n}, m={m}, r={r}")
    if target_spec_norm >= 1:
        warnings.warn("target spectral norm >= 1 may give an unstable system", stacklevel=2)
    A = rng.uniform(-1.0, 1.0, size=(n, n))
    A *= target_spec_norm / spectral_norm(A)
    B = rng.uniform(-1.0, 1.0, size=(n, m))
    C = rng.uniform(-1.0, 1.0, size=(r, n))
    D = rng.uniform(-1.0, 1.0, size=(r, m))
    return SystemModel(A, B, C, D)


def gen_inputs(T_total, m, sigma, rng):
    """``(T_total, m)`` array of i.i.d. N(0, sigma^2) entries."""
    if T_total < 1 or m < 1:
        raise ValueError("T_total and m must be positive")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return sigma * rng.standard_normal((T_total, m))


def sample_attack(model, x_t, rng):
    """Draw ``(flag, w_t)`` for one time step given the current state."""
    n = x_t.shape[0]
    if model.variant == "none":
        return False, np.zeros(n)
    flag = bool(rng.random() < model.p)
    if not flag:
        return False, np.zeros(n)
    if model.variant == "iid_gaussian":
        mean = np.zeros(n) if model.mean is None else np.asarray(model.mean, dtype=float)
        return True, mean + np.sqrt(model.cov_scale) * rng.standard_normal(n)
    if model.variant == "sign_adaptive":
        nonneg = x_t >= 0
        if not model.nonneg_gets_high:
            nonneg = ~nonneg
        mean = np.where(nonneg, model.high, model.low)
        return True, mean + np.sqrt(model.cov_scale) * rng.standard_normal(n)
    return True, np.asarray(model.callback(x_t, rng), dtype=float)


def simulate(sys, attack, x0, T_total, sigma, k, rng, inputs=None, attack_log=None):
    """Run the attacked dynamics for ``T_total`` steps.

    Inputs are drawn with :func:`gen_inputs` before the state recursion starts,
    then ``w_t`` is drawn after ``x_t`` is known.  Passing ``inputs`` and
    ``attack_log=(flags, values)`` replays a recorded run exactly.
    """
    if T_total < k:
        raise ValueError(f"T_total={T_total} must be at least k={k}")
    n = sys.n
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)
    if x0.shape != (n,):
        raise ValueError(f"x0 must have shape ({n},)")
    if inputs is None:
        inputs = gen_inputs(T_total, sys.m, sigma, rng)
    inputs = np.asarray(inputs, dtype=float)
    if inputs.shape != (T_total, sys.m):
        raise ValueError(f"inputs must have shape ({T_total}, {sys.m})")

    states = np.empty((T_total, n))
    obs = np.empty((T_total, sys.r))
    flags = np.zeros(T_total, dtype=bool)
    wvals = np.zeros((T_total, n))
    A, B = sys.A, sys.B
    x = x0.copy()
    with np.errstate(over="ignore", invalid="ignore"):  # overflow is reported below
        for t in range(T_total):
            if not np.all(np.abs(x) <= OVERFLOW_LIMIT):
                raise SimulationError(f"state overflow at step {t}", t)
            states[t] = x
            obs[t] = sys.C @ x + sys.D @ inputs[t]
            if attack_log is not None:
                flags[t], wvals[t] = attack_log[0][t], attack_log[1][t]
            else:
                flags[t], wvals[t] = sample_attack(attack, x, rng)
            x = A @ x + B @ inputs[t] + wvals[t]
    if not np.all(np.abs(x) <= OVERFLOW_LIMIT):
        raise SimulationError(f"state overflow at step {T_total}", T_total)
    return Trajectory(inputs, states, obs, flags, wvals, float(sigma), int(k), final_state=x)


def verify_stability(sys, t_check=200):
    """Estimate ``(psi, rho)`` with ``||A^t||_2 <= psi rho^t`` for ``t <= t_check``.

    ``rho`` is the spectral radius plus 1e-6 (floored at 1e-12 for nilpotent A).
    """
    A = sys.A if isinstance(sys, SystemModel) else np.atleast_2d(sys)
    srad = float(np.max(np.abs(np.linalg.eigvals(A))))
    if srad >= 1.0:
        raise InstabilityError(f"spectral radius {srad:.6g} >= 1")
    rho = max(srad + 1e-6, RHO_FLOOR) if srad > 0 else RHO_FLOOR
    rho = min(rho, np.nextafter(1.0, 0.0))
    psi = 1.0
    P = np.eye(A.shape[0])
    logrho = np.log(rho)
    for t in range(1, t_check + 1):
        P = P @ A
        nrm = np.linalg.norm(P, 2)
        if nrm == 0.0:
            break
        psi = max(psi, float(np.exp(np.log(nrm) - t * logrho)))
    return StabilityCert(psi=psi, rho=rho, t_check=t_check)


# --- serialization -------------------------------------------------------

def write_trajectory_csv(traj, path):
    """Columnar CSV ``t,u_1..u_m,y_1..y_r,xi,w_1..w_n`` behind a version line."""
    N, m = traj.inputs.shape
    r = traj.observations.shape[1]
    n = traj.attack_values.shape[1]
    cols = (["t"] + [f"u_{i + 1}" for i in range(m)] + [f"y_{i + 1}" for i in range(r)]
            + ["xi"] + [f"w_{i + 1}" for i in range(n)])
    data = np.column_stack([np.arange(N), traj.inputs, traj.observations,
                            traj.attack_flags.astype(int), traj.attack_values])
    with open(path, "w") as fh:
        fh.write(f"{TRAJ_HEADER}\n")
        fh.write(f"# k={traj.k} sigma={traj.input_std!r}\n")
        fh.write(",".join(cols) + "\n")
        for row in data:
            fh.write(",".join([str(int(row[0]))]
                              + [repr(float(v)) for v in row[1:1 + m + r]]
                              + [str(int(row[1 + m + r]))]
                              + [repr(float(v)) for v in row[2 + m + r:]]) + "\n")


def read_trajectory_csv(path):
    """Return ``(inputs, observations, flags, attack_values, k, sigma)``."""
    with open(path) as fh:
        head = fh.readline().strip()
        if head != TRAJ_HEADER:
            raise ValueError(f"not a trajectory file: {head!r}")
        meta = dict(kv.split("=") for kv in fh.readline().lstrip("# ").split())
        cols = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    m = sum(c.startswith("u_") for c in cols)
    r = sum(c.startswith("y_") for c in cols)
    return (data[:, 1:1 + m], data[:, 1 + m:1 + m + r], data[:, 1 + m + r].astype(bool),
            data[:, 2 + m + r:], int(meta["k"]), float(meta["sigma"]))


def save_trajectory_log(traj, path):
    """Binary replay log: version line followed by an ``.npz`` payload."""
    buf = io.BytesIO()
    np.savez(buf, inputs=traj.inputs, states=traj.states, observations=traj.observations,
             attack_flags=traj.attack_flags, attack_values=traj.attack_values,
             input_std=traj.input_std, k=traj.k)
    with open(path, "wb") as fh:
        fh.write((TRAJ_HEADER + "\n").encode())
        fh.write(buf.getvalue())


def load_trajectory_log(path):
    with open(path, "rb") as fh:
        head = fh.readline().decode().strip()
        if head != TRAJ_HEADER:
            raise ValueError(f"not a trajectory log: {head!r}")
        z = np.load(io.BytesIO(fh.read()))
        return Trajectory(z["inputs"], z["states"], z["observations"], z["attack_flags"],
                          z["attack_values"], float(z["input_std"]), int(z["k"]))
