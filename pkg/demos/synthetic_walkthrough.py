"""Hypergradients on a 3-state contextual MDP, exact and sampled.

Run with ``python demos/synthetic_walkthrough.py``.
"""
from __future__ import annotations

import numpy as np

from cbrl.harness.checks import fd_gradient, test_family
from cbrl.hypergrad import exact_hypergradient
from cbrl.optim import OuterConfig, run

prob = test_family().problem()
x = np.array([0.5, -0.5])

# The exact hypergradient accounts for how the follower's softmax best response moves with x.
g = exact_hypergradient(x, prob)
print("exact dF/dx        ", np.round(g, 6))
print("finite differences ", np.round(fd_gradient(prob, x), 6))

# HPGD only sees sampled trajectories from an approximate best response,
# so single-seed curves are noisy; the stationarity trend shows up over seeds.
for alg in ("hpgd", "hpgd-rtq", "zero-order"):
    rec = run(prob, OuterConfig(alg, iterations=300, step=0.05, eval_every=100, seed=0,
                                track_grad_norm=True))
    curve = [(e.iteration, round(e.upper_return, 4)) for e in rec.evals]
    print(f"{alg:11s} upper return {curve}  inner iterations/step {np.mean(rec.inner_iterations):.1f}")
