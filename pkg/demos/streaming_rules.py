"""Streaming estimates of the Markov matrix, one update every k samples.

Compares the oracle-assisted step rules (best and Polyak) with the
projected rule that needs no knowledge of the true system, in the
single-sample and mini-batch modes.

    python3 demos/streaming_rules.py
"""
import numpy as np

from advsysid import batch, markov, simkit, streaming

rng = simkit.make_rng(11)
k, sigma = 20, 10.0
sys = simkit.gen_system(60, 6, 9, 0.6, rng)
attack = simkit.AttackModel("sign_adaptive", p=1 / (2 * k), low=300.0, high=1000.0,
                            cov_scale=25.0)
traj = simkit.simulate(sys, attack, np.full(60, 1000.0), 3000 + k - 1, sigma, k, rng)
data = markov.build_dataset(traj)
G_star = markov.true_markov(sys, k).G

q = batch.attack_window_prob(attack.p, k)
R = 2 * np.linalg.norm(G_star)
beta = 1.1 * streaming.beta_threshold(R, q, sigma)
print(f"q = {q:.3f}, projection radius R = {R:.1f}, beta = {beta:.1f}")

checkpoints = (500, 1000, 2000, 3000)
print(f"\n{'rule':>22} " + " ".join(f"t={t:<7d}" for t in checkpoints))
for batch_size in (0, 100):
    for variant in ("best", "polyak", "projected"):
        rule = streaming.StepRule(variant, beta=beta, R=R)
        states = streaming.run_stream(data, rule, G_star=G_star, batch_size=batch_size,
                                      rng=simkit.make_rng(0))
        errs = [np.linalg.norm(streaming.estimate_at(states, t) - G_star) for t in checkpoints]
        label = f"{variant} ({'mini-batch' if batch_size else 'single'})"
        print(f"{label:>22} " + " ".join(f"{e:<9.3g}" for e in errs))
