"""Experiment configuration, the hybrid streaming/batch pipeline and presets.

A run is fully determined by its configuration and the replicate seed that
appears in every output row.
"""
from __future__ import annotations

import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from typing import Optional

import numpy as np

from . import batch, markov, realization, simkit, streaming

SCHEMA = "advsysid-config/1"
TIMELINE_HEADER = "t,estimator,err_fro,err_spec,hankel_err,d_err,objective,seed,k"
SEED_ENV = "ADVSYSID_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    system: dict = field(default_factory=lambda: {"n": 20, "m": 2, "r": 2, "spec_norm": 0.6})
    k: int = 10
    sigma: float = 10.0
    attack: dict = field(default_factory=lambda: {"variant": "none"})
    x0: object = 0.0
    T_total: int = 600
    T_star: Optional[int] = None
    estimators: list = field(default_factory=lambda: ["l2", "l1", "least_squares"])
    stream: dict = field(default_factory=lambda: {"rule": "projected"})
    seed: int = 0
    replicates: int = 1
    d: Optional[int] = None
    eta: Optional[float] = None
    c_Tstar: float = 1.0
    delta: float = 0.05
    allow_assumption_violation: bool = False
    oracle: bool = True
    objective_window: int = 100
    out: str = "out"
    schema: str = SCHEMA
    name: str = ""

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        schema = raw.get("schema", SCHEMA)
        if schema != SCHEMA:
            raise ConfigError(f"unsupported config schema {schema!r}")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from None
        return cls.from_dict(raw)

    def to_dict(self):
        return asdict(self)

    @property
    def p(self):
        p = self.attack.get("p")
        if self.attack.get("variant", "none") == "none":
            return 0.0
        return 1.0 / (2 * self.k) if p is None else float(p)

    @property
    def d_order(self):
        return self.d if self.d is not None else max(self.k // 2, 1)

    def validate(self):
        if self.k < 1:
            raise ConfigError("k must be at least 1")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if self.T_total < self.k:
            raise ConfigError("T_total must be at least k")
        if self.T_star is not None:
            if self.T_star < self.k:
                raise ConfigError(f"T_star={self.T_star} must be at least k={self.k}")
            if self.T_star > self.T_total:
                raise ConfigError("T_star must not exceed T_total")
        if self.d is not None and not 1 <= self.d <= max(self.k // 2, 1):
            raise ConfigError(f"d must lie in [1, floor(k/2)], got {self.d}")
        if self.replicates < 1:
            raise ConfigError("replicates must be positive")
        p = self.p
        if not 0 <= p < 1:
            raise ConfigError(f"attack probability {p} outside [0, 1)")
        if self.k > 1 and p >= 1 / (2 * (self.k - 1)):
            if not self.allow_assumption_violation:
                raise ConfigError(f"p={p} >= 1/(2(k-1)); set allow_assumption_violation")
            warnings.warn("attack probability violates p < 1/(2(k-1))", stacklevel=2)
        for e in self.estimators:
            if e not in ("l2", "l1", "least_squares"):
                raise ConfigError(f"unknown estimator {e!r}")
        rule = self.stream.get("rule", "projected")
        if rule not in ("best", "polyak", "projected"):
            raise ConfigError(f"unknown step rule {rule!r}")
        if not self.oracle and rule != "projected":
            raise ConfigError("without an oracle only the projected rule can run")
        if not self.oracle and self.stream.get("R_factor") is not None:
            raise ConfigError("R_factor scales ||G*||_F and needs the oracle; give R instead")
        sysd = self.system
        if not ({"A", "B", "C", "D"} <= set(sysd) or {"n", "m", "r"} <= set(sysd)):
            raise ConfigError("system needs n, m, r or explicit A, B, C, D")
        if {"n", "m", "r"} <= set(sysd) and min(sysd["n"], sysd["m"], sysd["r"]) < 1:
            raise ConfigError("system dimensions must be positive")


def load_preset(name):
    """Config shipped with the package, e.g. ``"example1_desk"``."""
    try:
        text = resources.files("advsysid.configs").joinpath(f"{name}.json").read_text()
    except FileNotFoundError:
        raise ConfigError(f"no preset named {name!r}") from None
    return ExperimentConfig.from_dict(json.loads(text))


def master_seed(cfg, override=None):
    if override is not None:
        return int(override)
    env = os.environ.get(SEED_ENV)
    if env:
        return int(env)
    return int(cfg.seed)


# --- building blocks ------------------------------------------------------

def build_system(cfg, rng):
    s = cfg.system
    if "A" in s:
        return simkit.SystemModel(np.array(s["A"]), np.array(s["B"]), np.array(s["C"]),
                                  np.array(s["D"]))
    gen_rng = simkit.make_rng(s["seed"]) if s.get("seed") is not None else rng
    return simkit.gen_system(s["n"], s["m"], s["r"], s.get("spec_norm", 0.6), gen_rng)


def build_attack(cfg):
    a = dict(cfg.attack)
    variant = a.pop("variant", "none")
    a.pop("p", None)
    mean = a.pop("mean", None)
    return simkit.AttackModel(variant, p=cfg.p, mean=None if mean is None else np.array(mean),
                              **a)


def build_x0(cfg, n):
    x0 = cfg.x0
    if isinstance(x0, (int, float)):
        return np.full(n, float(x0))
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (n,):
        raise ConfigError(f"x0 must have length {n}")
    return x0


def default_eta(cfg, sys):
    return cfg.eta if cfg.eta is not None else build_attack(cfg).norm_scale(sys.n)


def build_rule(cfg, sys, cert, G_star=None):
    st = cfg.stream
    variant = st.get("rule", "projected")
    R = st.get("R", "auto")
    if st.get("R_factor") is not None and G_star is not None:
        R = st["R_factor"] * float(np.linalg.norm(G_star))
    elif R == "auto":
        R = streaming.radius_bound(*(np.linalg.norm(M) for M in (sys.D, sys.C, sys.B)),
                                   cert.psi, cfg.k)
    q = float(batch.attack_window_prob(cfg.p, cfg.k))
    beta = st.get("beta", "auto")
    if beta == "auto":
        beta = st.get("beta_factor", 1.1) * streaming.beta_threshold(R, q, cfg.sigma)
    rule = streaming.StepRule(variant, alpha=st.get("alpha", 1.0), beta=float(beta),
                              R=float(R), gamma_choice=st.get("gamma_choice", "mid"))
    if variant == "projected" and 1 - 2 * q > 0:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            streaming.check_beta(rule, q, cfg.sigma)
    return rule


def resolve_T_star(cfg, sys, cert):
    if cfg.T_star is not None:
        return cfg.T_star
    tb = batch.theory_bounds(sys, cert, cfg.p, cfg.k, sys.m, cfg.sigma, default_eta(cfg, sys),
                             cfg.delta, cfg.c_Tstar)
    T = int(math.ceil(tb.T_star_scale / cfg.k) * cfg.k)
    cap = (cfg.T_total // cfg.k) * cfg.k
    if T > cap:
        warnings.warn(f"theoretical recovery-time scale {T} exceeds T_total; using {cap}",
                      stacklevel=2)
        T = cap
    return max(T, cfg.k)


@dataclass(frozen=True)
class TimelineRecord:
    t: int
    estimator: str
    err_fro: float
    err_spec: float
    hankel_err: float
    d_err: float
    objective: float
    seed: int
    k: int

    def csv_row(self):
        return (f"{self.t},{self.estimator},{self.err_fro!r},{self.err_spec!r},"
                f"{self.hankel_err!r},{self.d_err!r},{self.objective!r},{self.seed},{self.k}")


def write_timeline(records, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(TIMELINE_HEADER + "\n")
        for rec in records:
            fh.write(rec.csv_row() + "\n")


def read_timeline(path):
    out = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != TIMELINE_HEADER:
            raise ValueError(f"unexpected timeline header {header!r}")
        for line in fh:
            t, est, *vals, seed, k = line.strip().split(",")
            out.append(TimelineRecord(int(t), est, *map(float, vals), int(seed), int(k)))
    return out


class Scorer:
    """Error metrics of Markov estimates against a known system."""

    def __init__(self, sys, k, d, oracle=True, cert=None):
        self.sys = sys
        self.k = k
        self.d = d
        self.oracle = oracle
        self.G_star = markov.true_markov(sys, k).G
        if oracle:
            self.H_true, _ = realization.hankel_true_truncated(sys, cert=cert)

    def __call__(self, G):
        if not self.oracle:
            nan = float("nan")
            return nan, nan, nan, nan
        diff = self.G_star - G
        err_fro = float(np.linalg.norm(diff))
        err_spec = float(np.linalg.norm(diff, 2))
        H0, _ = realization.estimated_hankels(markov.MarkovMatrix(G, self.k))
        hank = realization.hankel_error(self.H_true, H0)
        m = self.sys.m
        d_err = float(np.linalg.norm(self.sys.D - G[:, :m], 2))
        return err_fro, err_spec, hank, d_err


def window_objective(G, data, t, width):
    """Mean l2 residual of G on the last ``width`` samples observed before time t."""
    hi = t - data.k + 1
    if hi <= 0:
        return float("nan")
    lo = max(0, hi - width)
    R = data.targets[lo:hi] - data.regressors[lo:hi] @ G.T
    return float(np.mean(np.linalg.norm(R, axis=1)))


def controller_hook(t, model):
    """Placeholder for controller synthesis from the realized model (not implemented)."""
    return None


# --- hybrid pipeline ------------------------------------------------------

def run_hybrid(cfg, replicate=0, seed=None, return_models=False):
    """Streaming estimates before ``T_star``, a single l2 batch solve at ``T_star``.

    Records are emitted at multiples of k below ``T_star``, at ``T_star`` and at
    multiples of k after it up to ``T_total``.  After ``T_star`` the batch
    estimate is held fixed.  If a component fails mid-run, the records gathered
    so far are attached to the exception as ``partial_records``.
    """
    seed = simkit.replicate_seed(master_seed(cfg, seed), replicate)
    rng = simkit.make_rng(seed)
    sys = build_system(cfg, rng)
    cert = simkit.verify_stability(sys)
    k = cfg.k
    traj = simkit.simulate(sys, build_attack(cfg), build_x0(cfg, sys.n), cfg.T_total,
                           cfg.sigma, k, rng)
    data = markov.build_dataset(traj)
    T_star = resolve_T_star(cfg, sys, cert)
    score = Scorer(sys, k, cfg.d_order, oracle=cfg.oracle, cert=cert)
    G_star = score.G_star if cfg.oracle else None
    rule = build_rule(cfg, sys, cert, G_star)
    bsize = int(cfg.stream.get("batch_size", 0))
    tag = f"stream_{rule.variant}" + ("_mb" if bsize else "")
    state = streaming.StreamState.start(sys.r, sys.m, k, rule, G_star=G_star,
                                        batch_size=bsize, rng=simkit.make_rng(seed + 1))

    records, models = [], []

    def emit(t, name, G):
        vals = score(G)
        records.append(TimelineRecord(t, name, *vals,
                                      window_objective(G, data, t, cfg.objective_window),
                                      seed, k))
        try:
            model = realization.realize(markov.MarkovMatrix(G, k), cfg.d_order)
        except realization.RankDeficiencyError:
            model = None
        controller_hook(t, model)
        if return_models:
            models.append((t, model))

    try:
        wins = streaming.windows(data)
        t = 0
        while t < T_star:
            emit(t, tag, state.G)
            if t + k < T_star or t + k == T_star:
                _, win = next(wins)
                state = streaming.advance(state, win)
            t += k
        G_hat = batch.l2_estimator(data.head(T_star - k + 1))
        emit(T_star, "batch_l2", G_hat.G)
        t = (T_star // k + 1) * k
        while t <= cfg.T_total:
            emit(t, "batch_l2", G_hat.G)
            t += k
    except Exception as exc:
        exc.partial_records = records
        raise
    return (records, models) if return_models else records


def run_batch(cfg, replicate=0, seed=None):
    """Each configured batch estimator on the full trajectory; one record per estimator."""
    seed = simkit.replicate_seed(master_seed(cfg, seed), replicate)
    rng = simkit.make_rng(seed)
    sys = build_system(cfg, rng)
    cert = simkit.verify_stability(sys)
    traj = simkit.simulate(sys, build_attack(cfg), build_x0(cfg, sys.n), cfg.T_total,
                           cfg.sigma, cfg.k, rng)
    data = markov.build_dataset(traj)
    score = Scorer(sys, cfg.k, cfg.d_order, oracle=cfg.oracle, cert=cert)
    recs, ests = [], []
    for name in cfg.estimators:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            est = batch.estimate(data, batch.BatchOptions(method=name))
        ests.append(est)
        recs.append(TimelineRecord(cfg.T_total, name, *score(est.G),
                                   batch.l2_objective(est.G, data) / data.T, seed, cfg.k))
    return recs, ests


def run_stream_only(cfg, replicate=0, seed=None):
    seed = simkit.replicate_seed(master_seed(cfg, seed), replicate)
    rng = simkit.make_rng(seed)
    sys = build_system(cfg, rng)
    cert = simkit.verify_stability(sys)
    traj = simkit.simulate(sys, build_attack(cfg), build_x0(cfg, sys.n), cfg.T_total,
                           cfg.sigma, cfg.k, rng)
    data = markov.build_dataset(traj)
    score = Scorer(sys, cfg.k, cfg.d_order, oracle=cfg.oracle, cert=cert)
    rule = build_rule(cfg, sys, cert, score.G_star if cfg.oracle else None)
    bsize = int(cfg.stream.get("batch_size", 0))
    states = streaming.run_stream(data, rule, G_star=score.G_star if cfg.oracle else None,
                                  batch_size=bsize, rng=simkit.make_rng(seed + 1))
    tag = f"stream_{rule.variant}" + ("_mb" if bsize else "")
    return [TimelineRecord(st.t, tag, *score(st.G),
                           window_objective(st.G, data, st.t, cfg.objective_window), seed, cfg.k)
            for st in states]


# --- replicate fan-out ----------------------------------------------------

def _hybrid_job(args):
    cfg_dict, i, seed = args
    return run_hybrid(ExperimentConfig.from_dict(cfg_dict), i, seed)


def _stream_job(args):
    cfg_dict, i, seed = args
    return run_stream_only(ExperimentConfig.from_dict(cfg_dict), i, seed)


def _batch_job(args):
    cfg_dict, i, seed = args
    return run_batch(ExperimentConfig.from_dict(cfg_dict), i, seed)[0]


_JOBS = {"hybrid": _hybrid_job, "stream": _stream_job, "batch": _batch_job}


def run_replicates(cfg, kind="hybrid", workers=1, seed=None, replicates=None):
    """Run replicates and concatenate their records in replicate order.

    Output does not depend on ``workers``: each replicate owns its seed and
    results are merged by replicate index.
    """
    n = cfg.replicates if replicates is None else replicates
    jobs = [(cfg.to_dict(), i, master_seed(cfg, seed)) for i in range(n)]
    fn = _JOBS[kind]
    results = []
    try:
        if workers <= 1 or n == 1:
            for j in jobs:
                results.append(fn(j))
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for res in pool.map(fn, jobs):
                    results.append(res)
    except Exception as exc:
        done = [rec for res in results for rec in res]
        exc.partial_records = done + list(getattr(exc, "partial_records", []))
        raise
    return [rec for res in results for rec in res]


# --- reference experiments ----------------------------------------------

EXAMPLE1_ATTACK = {"variant": "sign_adaptive", "low": 300.0, "high": 1000.0, "cov_scale": 25.0}


def example1_settings(scale):
    if scale == "paper":
        return dict(n=300, ks=(10, 20), T_max=500, T_step=10, seeds=5)
    if scale == "desk":
        return dict(n=60, ks=(10, 20), T_max=500, T_step=50, seeds=5)
    raise ConfigError(f"unknown scale {scale!r}")


def _example1_job(args):
    n, k, T_grid, seed = args
    rng = simkit.make_rng(seed)
    sys = simkit.gen_system(n, 6, 9, 0.6, rng)
    cert = simkit.verify_stability(sys)
    attack = simkit.AttackModel(p=1.0 / (2 * k), **EXAMPLE1_ATTACK)
    traj = simkit.simulate(sys, attack, np.full(n, 1000.0), max(T_grid) + k - 1, 10.0, k, rng)
    data = markov.build_dataset(traj)
    score = Scorer(sys, k, max(k // 2, 1), cert=cert)
    recs = []
    for T in T_grid:
        sub = data.head(T)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for name in ("least_squares", "l1", "l2"):
                est = batch.estimate(sub, batch.BatchOptions(method=name))
                recs.append(TimelineRecord(T, name, *score(est.G),
                                           batch.l2_objective(est.G, sub) / T, seed, k))
    return recs


def run_example1(scale="desk", out_dir="out", master=0, workers=1, seeds=None, ks=None):
    """Batch estimators on the Example-1 system, error against sample count T.

    Writes ``example1_k{k}.csv`` per order k (timeline schema, t is T) and
    returns ``{k: records}``.
    """
    st = example1_settings(scale)
    seeds = st["seeds"] if seeds is None else seeds
    ks = st["ks"] if ks is None else ks
    T_grid = list(range(st["T_step"], st["T_max"] + 1, st["T_step"]))
    out = {}
    for k in ks:
        jobs = [(st["n"], k, T_grid, simkit.replicate_seed(master, i)) for i in range(seeds)]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                res = list(pool.map(_example1_job, jobs))
        else:
            res = [_example1_job(j) for j in jobs]
        out[k] = [r for rr in res for r in rr]
        if out_dir:
            write_timeline(out[k], os.path.join(out_dir, f"example1_k{k}.csv"))
    return out


def example2_settings(scale):
    if scale == "paper":
        return dict(n=300, k=20, t_max=20000, seeds=5, batch_size=100)
    if scale == "desk":
        return dict(n=60, k=20, t_max=4000, seeds=20, batch_size=100)
    raise ConfigError(f"unknown scale {scale!r}")


EXAMPLE2_HEADER = TIMELINE_HEADER + ",mode,q,nu,bound_floor,bound_rate,R,norm_fro"


@dataclass(frozen=True)
class CurvePoint:
    rec: TimelineRecord
    mode: str
    q: float
    nu: float
    bound_floor: float
    bound_rate: float
    R: float
    norm_fro: float

    def csv_row(self):
        return (self.rec.csv_row() + f",{self.mode},{self.q!r},{self.nu!r},"
                f"{self.bound_floor!r},{self.bound_rate!r},{self.R!r},{self.norm_fro!r}")


def _example2_job(args):
    n, k, t_max, bsize, seed, hankel_every, R_factor, beta_factor = args
    rng = simkit.make_rng(seed)
    sys = simkit.gen_system(n, 6, 9, 0.6, rng)
    cert = simkit.verify_stability(sys)
    p = 1.0 / (2 * k)
    attack = simkit.AttackModel(p=p, **EXAMPLE1_ATTACK)
    traj = simkit.simulate(sys, attack, np.full(n, 1000.0), t_max + k - 1, 10.0, k, rng)
    data = markov.build_dataset(traj)
    score = Scorer(sys, k, max(k // 2, 1), cert=cert)
    eta = attack.norm_scale(n)
    tb = batch.theory_bounds(sys, cert, p, k, sys.m, 10.0, eta)
    G_star = score.G_star
    R = R_factor * float(np.linalg.norm(G_star))
    beta = beta_factor * streaming.beta_threshold(R, tb.q, 10.0)
    out = []
    for mode, b in (("stochastic", 0), ("minibatch", bsize)):
        for variant in ("best", "polyak", "projected"):
            rule = streaming.StepRule(variant, beta=beta, R=R)
            states = streaming.run_stream(data, rule, G_star=G_star, batch_size=b,
                                          rng=simkit.make_rng(seed + 1))
            for i, st in enumerate(states):
                err_fro = st.error
                if i % hankel_every == 0 or i == len(states) - 1:
                    vals = score(st.G)
                else:
                    m = sys.m
                    vals = (err_fro, float(np.linalg.norm(G_star - st.G, 2)), float("nan"),
                            float(np.linalg.norm(sys.D - st.G[:, :m], 2)))
                rec = TimelineRecord(st.t, variant, *vals, float("nan"), seed, k)
                out.append(CurvePoint(rec, mode, tb.q, tb.nu, tb.error_bound,
                                      k / math.sqrt(st.t + k), R,
                                      float(np.linalg.norm(st.G))))
    return out


def run_example2(scale="desk", out_dir="out", master=0, workers=1, seeds=None,
                 hankel_every=20, R_factor=2.0, beta_factor=1.1, t_max=None):
    """Streaming rules (best, Polyak, projected) in stochastic and mini-batch modes.

    Writes ``example2.csv`` (timeline columns plus mode, theory overlay
    columns, the projection radius and the iterate norm) and returns the list
    of curve points.  ``bound_floor`` is the batch error scaling and
    ``bound_rate`` is ``k / sqrt(t + k)``, the shape of the projected-rule rate.
    """
    st = example2_settings(scale)
    seeds = st["seeds"] if seeds is None else seeds
    t_max = st["t_max"] if t_max is None else t_max
    jobs = [(st["n"], st["k"], t_max, st["batch_size"], simkit.replicate_seed(master, i),
             hankel_every, R_factor, beta_factor) for i in range(seeds)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            res = list(pool.map(_example2_job, jobs))
    else:
        res = [_example2_job(j) for j in jobs]
    pts = [p for rr in res for p in rr]
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "example2.csv"), "w") as fh:
            fh.write(EXAMPLE2_HEADER + "\n")
            for p in pts:
                fh.write(p.csv_row() + "\n")
    return pts
