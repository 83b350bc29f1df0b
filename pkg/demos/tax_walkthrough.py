"""Tax design with two household types: how rates move under HPGD and Zero-Order.

Run with ``python demos/tax_walkthrough.py``. Takes a few minutes.
"""
from __future__ import annotations

import numpy as np

from cbrl.envs.tax import tax_problem
from cbrl.hypergrad import exact_hypergradient
from cbrl.optim import OuterConfig, evaluate_upper_return, run

prob = tax_problem()
z0 = prob.x0
print("rates (income, VAT1, VAT2, VAT3):", z0)
print("welfare:", round(evaluate_upper_return(z0, prob), 3))
print("exact dF/dz:", np.round(exact_hypergradient(z0, prob), 3))

for alg in ("hpgd", "zero-order"):
    rec = run(prob, OuterConfig(alg, iterations=100, step=0.1, env_steps=10000, eval_every=25))
    print(f"{alg:10s} welfare {[round(e.upper_return, 2) for e in rec.evals]}"
          f"  final rates {np.round(rec.x_final, 3)}")
