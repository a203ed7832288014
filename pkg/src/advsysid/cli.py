"""Command-line entry point.

Exit status: 0 on success, 1 on invalid usage or configuration, 2 on a
numerical failure (unstable system, diverging simulation, solver breakdown).
"""
from __future__ import annotations

import argparse
import os
import sys
import warnings

import numpy as np

from . import batch, pipeline, simkit

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2

NUMERIC_ERRORS = (simkit.SimulationError, simkit.InstabilityError,
                  simkit.PowerIterationError, batch.BatchSolverError, np.linalg.LinAlgError,
                  FloatingPointError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _parser():
    p = _Parser(prog="advsysid", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="config JSON path or preset name")
    common.add_argument("--seed", type=int, help="master seed (overrides config and env)")
    common.add_argument("--replicates", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--scale", choices=("paper", "desk"), default="desk")
    common.add_argument("--format", choices=("csv",), default="csv")
    common.add_argument("--no-oracle", action="store_true",
                        help="emit objectives only; error columns are NaN")
    helps = {
        "simulate": "simulate trajectories and write them to CSV and replay logs",
        "batch": "run batch estimators on simulated data",
        "stream": "run a streaming estimator",
        "hybrid": "streaming estimates, then one l2 batch solve at T_star",
        "example1": "batch estimators against sample count on the example1 system",
        "example2": "streaming rules against time on the example2 system",
        "bounds": "print theory scalings for a config",
    }
    for name, h in helps.items():
        sub.add_parser(name, parents=[common], help=h)
    return p


def _load_config(args):
    if args.config is None:
        raise pipeline.ConfigError("--config is required for this command")
    if os.path.exists(args.config):
        cfg = pipeline.ExperimentConfig.load(args.config)
    elif os.sep not in args.config and not args.config.endswith(".json"):
        cfg = pipeline.load_preset(args.config)
    else:
        raise pipeline.ConfigError(f"config file not found: {args.config}")
    if args.replicates is not None:
        cfg.replicates = args.replicates
    if args.no_oracle:
        cfg.oracle = False
    cfg.validate()
    return cfg


def _out_dir(args, cfg=None):
    out = args.out or (cfg.out if cfg is not None else "out")
    os.makedirs(out, exist_ok=True)
    return out


def cmd_simulate(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    master = pipeline.master_seed(cfg, args.seed)
    for i in range(cfg.replicates):
        seed = simkit.replicate_seed(master, i)
        rng = simkit.make_rng(seed)
        sys_ = pipeline.build_system(cfg, rng)
        simkit.verify_stability(sys_)
        traj = simkit.simulate(sys_, pipeline.build_attack(cfg), pipeline.build_x0(cfg, sys_.n),
                               cfg.T_total, cfg.sigma, cfg.k, rng)
        simkit.write_trajectory_csv(traj, os.path.join(out, f"traj_{seed}.csv"))
        simkit.save_trajectory_log(traj, os.path.join(out, f"traj_{seed}.log"))
        print(f"replicate {i} seed {seed}: {traj.attack_flags.sum()} attacks in {len(traj)} steps")
    return EXIT_OK


def _timeline_cmd(kind, fname):
    def run(args):
        cfg = _load_config(args)
        out = _out_dir(args, cfg)
        path = os.path.join(out, fname)
        try:
            recs = pipeline.run_replicates(cfg, kind, workers=args.workers, seed=args.seed)
        except Exception as exc:
            partial = getattr(exc, "partial_records", None)
            if partial:
                pipeline.write_timeline(partial, path)
                print(f"wrote {len(partial)} records before failure to {path}", file=sys.stderr)
            raise
        pipeline.write_timeline(recs, path)
        print(f"wrote {len(recs)} records to {path}")
        return EXIT_OK
    return run


def cmd_example1(args):
    cfg = pipeline.load_preset(f"example1_{args.scale}") if args.config is None \
        else _load_config(args)
    out = _out_dir(args)
    res = pipeline.run_example1(args.scale, out, master=pipeline.master_seed(cfg, args.seed),
                                workers=args.workers, seeds=args.replicates or cfg.replicates)
    for k, recs in res.items():
        final = max(r.t for r in recs)
        for est in ("least_squares", "l1", "l2"):
            errs = [r.err_fro for r in recs if r.t == final and r.estimator == est]
            print(f"k={k} T={final} {est}: median err {np.median(errs):.4g}")
    return EXIT_OK


def cmd_example2(args):
    cfg = pipeline.load_preset(f"example2_{args.scale}") if args.config is None \
        else _load_config(args)
    out = _out_dir(args)
    pts = pipeline.run_example2(args.scale, out, master=pipeline.master_seed(cfg, args.seed),
                                workers=args.workers, seeds=args.replicates or cfg.replicates)
    t_end = max(p.rec.t for p in pts)
    for mode in ("stochastic", "minibatch"):
        for v in ("best", "polyak", "projected"):
            errs = [p.rec.err_fro for p in pts
                    if p.rec.t == t_end and p.mode == mode and p.rec.estimator == v]
            print(f"{mode} {v}: median err at t={t_end} {np.median(errs):.4g}")
    return EXIT_OK


def cmd_bounds(args):
    cfg = _load_config(args)
    seed = simkit.replicate_seed(pipeline.master_seed(cfg, args.seed), 0)
    sys_ = pipeline.build_system(cfg, simkit.make_rng(seed))
    cert = simkit.verify_stability(sys_)
    tb = batch.theory_bounds(sys_, cert, cfg.p, cfg.k, sys_.m, cfg.sigma,
                             pipeline.default_eta(cfg, sys_), cfg.delta, cfg.c_Tstar)
    print(f"q = {tb.q:.6g}")
    print(f"nu = {tb.nu:.6g}")
    print(f"T_star_scale = {tb.T_star_scale:.6g}  (c_Tstar = {tb.c_Tstar:g})")
    print(f"error_scale = {tb.error_bound:.6g}  (rho = {tb.rho:.6g}, psi = {cert.psi:.6g})")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "batch": _timeline_cmd("batch", "batch_timeline.csv"),
    "stream": _timeline_cmd("stream", "stream_timeline.csv"),
    "hybrid": _timeline_cmd("hybrid", "hybrid_timeline.csv"),
    "example1": cmd_example1,
    "example2": cmd_example2,
    "bounds": cmd_bounds,
}


def main(argv=None):
    try:
        args = _parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    if args.workers < 1:
        print("advsysid: error: --workers must be positive", file=sys.stderr)
        return EXIT_INVALID
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](args)
    except NUMERIC_ERRORS as exc:
        print(f"advsysid: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (pipeline.ConfigError, batch.AssumptionViolation, ValueError, KeyError,
            TypeError) as exc:
        print(f"advsysid: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
