"""
Pouring: two good places to stand, one angle that does not matter
=================================================================

The pouring surrogate rewards two mirror-image placements of the source
cup and ignores the final cup angle. The marginal histograms of the fitted
posterior show how much of that structure the sequential fit recovers.
"""

import numpy as np

from policyscope import DiscoverConfig, make_env, run_discover
from policyscope.store import pairgrid

env = make_env("poursim")
cert = run_discover(env, "pour", DiscoverConfig(n_rounds=5, rollouts_per_round=300, seed=0))
x = cert.sample(4000, np.random.default_rng(0))

rows = pairgrid(x, env.prior, bins=10)
for name in env.prior.names:
    dens = [r["density"] for r in rows if r["kind"] == "marginal" and r["var_x"] == name]
    peak = max(dens)
    bars = "".join(" .:-=+*#%@"[min(9, int(9 * d / peak))] for d in dens)
    print(f"{name:>7} |{bars}|")

print("fraction with rel_x > 0:", np.mean(x[:, env.prior.index("rel_x")] > 0).round(3))
