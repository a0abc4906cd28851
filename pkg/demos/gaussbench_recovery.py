"""
Recovering a known maximizer
============================

GaussianBench rewards a point by its negative squared distance to the box
centre, so the high-reward posterior should pile up there. A short run is
enough to see it happen.
"""

import numpy as np

from policyscope import DiscoverConfig, evaluate_posterior, make_env, run_discover

env = make_env("gaussbench-d2")
config = DiscoverConfig(n_rounds=4, rollouts_per_round=300, seed=0)

# one line per round: losses, the target reward r* and the self-likelihood
cert = run_discover(env, "reach", config, on_round=lambda r: print(
    f"round {r['round']}: val loss {r['val_loss']:.3f}  r* {r['r_star']:.4f}  self-loglik {r['self_loglik']:.2f}"))

x = cert.sample(2000, np.random.default_rng(1))
print("posterior mean", x.mean(axis=0).round(3), "target", env.theta_star)
print("posterior std ", x.std(axis=0).round(3), "prior std", np.full(2, 1 / np.sqrt(12)).round(3))
print(evaluate_posterior(cert, env, 2000, np.random.default_rng(2)))
