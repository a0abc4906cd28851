"""
Certificates for two puck-handling policies
===========================================

Fit one posterior per policy on PuckWorld, compare their mass marginals,
then let the certificates pick a policy for a heavy puck.
The run is shortened (6 rounds of 300 rollouts) so it finishes in a few
minutes; the acceptance suite uses the full 15 x 500 schedule.
"""

import numpy as np

from policyscope import Belief, DiscoverConfig, make_env, run_discover, select_task
from policyscope.store import save_certificate

env = make_env("puckworld")
config = DiscoverConfig(n_rounds=6, rollouts_per_round=300, seed=0)

certs = {p: run_discover(env, p, config) for p in ("push", "pickplace")}

# pickplace is limited by payload, push by puck height
spec = env.prior
for policy, cert in certs.items():
    x = cert.sample(3000, np.random.default_rng(0))
    u = (x - spec.lo) / spec.width
    print(f"{policy:>9}: mean mass {u[:, spec.index('mass')].mean():.2f}  mean h {u[:, spec.index('h')].mean():.2f}"
          f"  (normalized)")

heavy = np.full(spec.dim, 0.5)
heavy[spec.index("mass")] = 0.9
light_tall = np.full(spec.dim, 0.3)
light_tall[spec.index("h")] = 0.9
for label, mean in [("heavy puck", heavy), ("light tall puck", light_tall)]:
    choice = select_task(certs, Belief(mean, 0.005, spec), rng=np.random.default_rng(1))
    print(f"{label}: use {choice}")

save_certificate(certs["push"], "push_certificate.json")
print("wrote push_certificate.json")
