"""Stream until T*, then switch to a single l2 batch solve.

Runs the bundled ``hybrid_desk`` configuration for a few replicates and
shows how the realized model's Hankel error drops at the hand-off.

    python3 demos/hybrid_pipeline.py
"""
from advsysid import pipeline as pl

cfg = pl.load_preset("hybrid_desk")
recs = pl.run_replicates(cfg, "hybrid", replicates=3)

for seed in dict.fromkeys(r.seed for r in recs):
    rs = [r for r in recs if r.seed == seed]
    print(f"\nreplicate seed {seed}")
    print(f"{'t':>5} {'estimator':>20} {'err_fro':>10} {'hankel':>10} {'objective':>10}")
    for r in rs:
        if r.t % 100 == 0 or r.t == cfg.T_star - cfg.k:
            print(f"{r.t:5d} {r.estimator:>20} {r.err_fro:10.3g} {r.hankel_err:10.3g} "
                  f"{r.objective:10.3g}")

# the same run through the command line:
#   python3 -m advsysid hybrid --config hybrid_desk --replicates 3 --out out/
